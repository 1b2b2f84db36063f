#!/usr/bin/env python3
"""
cli.py — Linha de comando do pipeline de super-resolução com diversidade.

SUBCOMANDOS
-----------
    gen-data      gera dataset sintético (CGF1)
    fit-moments   ajusta E(SF|LR) e σ²(SF|LR) e anexa os campos ao dataset
    sweep-basis   varredura de modelos de estimação estocástica
    train         treina o GAN condicional
    deconv        deconvolução de um campo (adm | taylor | gan)
    evaluate      métricas de diversidade/consistência + relatório
    oracle        momentos gaussianos exatos anexados ao dataset

USO
---
    python cli.py gen-data --n 2000 --size 32 --delta 4 --seed 7 --out treino.cgf
    python cli.py fit-moments --data treino.cgf --model 3 --out-model se3 --out-data treino_m.cgf
    python cli.py sweep-basis --data treino.cgf --models 0..14 --p 1
    python cli.py train --data treino_m.cgf --variant diversity --steps 2000 --out g.cgg
    python cli.py evaluate --data valid_m.cgf --method gan --checkpoint g.cgg --out rel.json

Todo subcomando aceita --seed, --threads e --config (arquivo chave=valor;
flags explícitas vencem). Padrões de ambiente vêm do .env: SRDIV_THREADS,
SRDIV_LOG_LEVEL.

Código de saída: 0 sucesso, 1 erro de execução, 2 erro de uso.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

import numpy as np
from dotenv import dotenv_values, load_dotenv
from dotenv.parser import parse_stream

from autonet import AdamHyper
from deconv_classic import DEFAULT_ADM_TERMS, adm_deconvolve, box_op, gaussian_op, taylor_deconvolve
from errors import SrDivError
from evaluation import DEFAULT_BINS, build_report, emit_figures, emit_report
from filters import box_up, gaussian_filter, upsample_nearest
from gan import VARIANTS, LossWeights, TrainConfig, load_checkpoint, sample, save_checkpoint, train
from grid import (
    DEFAULT_DELTA,
    DEFAULT_SIZE,
    DEFAULT_TRAIN_FRACTION,
    Dataset,
    SpectrumParams,
    attach_moments,
    read_dataset,
    split_dataset,
    synth_dataset,
    write_dataset,
)
from moments import (
    DEFAULT_RIDGE,
    N_MODELS,
    BasisSpec,
    MomentField,
    NetTrainConfig,
    estimate_moment_fields,
    fit_moment_network,
    fit_stochastic,
    gaussian_oracle,
    sweep_models,
    write_moment_model,
)


# ── Helpers ───────────────────────────────────────────────────────────────────

def _default_threads() -> int:
    valor = os.environ.get("SRDIV_THREADS", "")
    try:
        return max(1, int(valor)) if valor else (os.cpu_count() or 1)
    except ValueError:
        logging.warning(f"SRDIV_THREADS inválido ({valor!r}); usando os núcleos disponíveis")
        return os.cpu_count() or 1


def parse_model_list(texto: str) -> list[int]:
    """'0..14', '0,3,6' ou uma mistura ('0..3,6')."""
    ids = []
    for parte in texto.split(","):
        parte = parte.strip()
        if not parte:
            continue
        if ".." in parte:
            a, b = parte.split("..", 1)
            ids.extend(range(int(a), int(b) + 1))
        else:
            ids.append(int(parte))
    for m in ids:
        if not 0 <= m < N_MODELS:
            raise argparse.ArgumentTypeError(f"modelo {m} fora de 0..{N_MODELS - 1}")
    if not ids:
        raise argparse.ArgumentTypeError("lista de modelos vazia")
    return ids


def _arch(texto: str) -> tuple[int, int]:
    try:
        blocos, filtros = (int(x) for x in texto.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"arquitetura esperada como 'blocos,filtros', recebido {texto!r}")
    return blocos, filtros


def read_config(path) -> dict[str, str]:
    """Arquivo chave=valor no formato .env (python-dotenv); '-' e '_' equivalentes nas chaves."""
    with open(path, encoding="utf-8") as fh:
        for b in parse_stream(fh):
            if b.error or (b.key is not None and b.value is None):
                raise ValueError(
                    f"{path}:{b.original.line}: esperado chave=valor, recebido {b.original.string.strip()!r}"
                )
    return {k.replace("-", "_"): v for k, v in dotenv_values(path, interpolate=False).items()}


_VERDADE = {"1", "true", "yes", "on", "sim"}


def _apply_config(sub: argparse.ArgumentParser, cfg: dict[str, str]) -> None:
    acoes = {a.dest: a for a in sub._actions}
    defaults = {}
    for chave, valor in cfg.items():
        acao = acoes.get(chave)
        if acao is None or chave in ("help", "config", "command"):
            sub.error(f"--config: chave desconhecida para este subcomando: {chave}")
        if isinstance(acao, argparse._StoreTrueAction):
            defaults[chave] = valor.lower() in _VERDADE
        elif acao.type is not None:
            try:
                defaults[chave] = acao.type(valor)
            except (ValueError, argparse.ArgumentTypeError) as e:
                sub.error(f"--config: valor inválido para {chave}: {e}")
        else:
            defaults[chave] = valor
        # Obrigatório atendido pelo arquivo.
        acao.required = False
    sub.set_defaults(**defaults)


def _train_valid(ds: Dataset, valid_path, fraction: float, seed: int):
    if valid_path:
        return ds, read_dataset(valid_path)
    return split_dataset(ds, fraction, seed)


def _slope(args, ds: Dataset) -> float:
    if args.slope is not None:
        return args.slope
    gerador = ds.meta.get("generator", {})
    if "slope" not in gerador:
        raise ValueError("slope desconhecido: passe --slope (o dataset não tem metadados do gerador)")
    if gerador.get("warp", 0.0):
        logging.warning(f"dataset com warp={gerador['warp']}: o oráculo gaussiano é só aproximado")
    return float(gerador["slope"])


# ── Subcomandos ───────────────────────────────────────────────────────────────

def cmd_gen_data(args) -> int:
    ds = synth_dataset(args.n, args.size, args.size, args.slope, args.warp, args.seed,
                       delta=args.delta, threads=args.threads)
    write_dataset(ds, args.out)
    print(f"→ {len(ds)} amostra(s) {args.size}×{args.size}, Δ={args.delta} gravadas em {args.out}")
    return 0


def _attach_and_write(mean_est, var_est, entrada, saida) -> None:
    ds = entrada if isinstance(entrada, Dataset) else read_dataset(entrada)
    mf = estimate_moment_fields(mean_est, var_est, ds.lr())
    write_dataset(attach_moments(ds, mf.mean, mf.variance), saida)
    print(f"→ momentos anexados a {len(ds)} amostra(s): {saida}")


def cmd_fit_moments(args) -> int:
    ds = read_dataset(args.data)
    if args.estimator == "stochastic":
        spec = BasisSpec(args.model, args.linear_only)
        mm1 = fit_stochastic(ds, 1, spec, args.ridge, tie_offsets=args.tie_offsets, threads=args.threads)
        mm2 = fit_stochastic(ds, 2, spec, args.ridge, center_model=mm1,
                             tie_offsets=args.tie_offsets, threads=args.threads)
        print(f"→ modelo {spec.label} (q={spec.q}): MSE p=1 {mm1.train_mse:.6g}, p=2 {mm2.train_mse:.6g}")
        if args.out_model:
            for mm in (mm1, mm2):
                destino = f"{args.out_model}.p{mm.p}.cgm"
                write_moment_model(mm, destino)
                print(f"→ {destino}")
        media, var = mm1, mm2
    else:
        cfg = NetTrainConfig(epochs=args.epochs, batch_size=args.batch_size, seed=args.seed,
                             adam=AdamHyper(lr=args.lr))
        net1 = fit_moment_network(ds, 1, args.arch, cfg)
        net2 = fit_moment_network(ds, 2, args.arch, cfg, center_model=net1)
        for net in (net1, net2):
            ultimo = net.history[-1] if net.history else {}
            print(f"→ rede p={net.p} {net.arch}: MSE validação {ultimo.get('valid_mse', float('nan')):.6g}")
            if args.out_model:
                destino = f"{args.out_model}.p{net.p}.cgn"
                net.save(destino)
                print(f"→ {destino}")
        media, var = net1, net2

    if args.out_data:
        _attach_and_write(media, var, ds, args.out_data)
    for entrada, saida in args.attach or []:
        _attach_and_write(media, var, entrada, saida)
    return 0


def cmd_sweep_basis(args) -> int:
    ds = read_dataset(args.data)
    treino, valid = _train_valid(ds, args.valid, args.fraction, args.seed)
    rep = sweep_models(treino, valid, args.p, args.models, args.ridge,
                       linear_only=args.linear_only, threads=args.threads)
    df = rep.to_frame()
    print(df.to_string(index=False))
    print(f"→ modelo selecionado: {rep.selected}")
    if args.out:
        df.to_csv(args.out, index=False, float_format="%.17g")
        print(f"→ {args.out}")
    return 0


def cmd_train(args) -> int:
    ds = read_dataset(args.data)
    cfg = TrainConfig(
        m=args.m, r=args.r, steps=args.steps, seed=args.seed, variant=args.variant,
        adam_g=AdamHyper(lr=args.lr_g, beta1=0.5), adam_d=AdamHyper(lr=args.lr_d, beta1=0.5),
        noise_channels=args.noise, blocks=args.blocks, filters=args.filters,
    )
    pesos = LossWeights(alpha=args.alpha, beta=args.beta, gamma=args.gamma)
    ck, log = train(cfg, ds, pesos)
    save_checkpoint(ck, args.out)
    destino_log = args.log or f"{args.out}.log.csv"
    log.write_csv(destino_log)
    contrib = log.mean_contributions(last=max(1, args.steps // 4))
    print(f"→ checkpoint {args.out}; log {destino_log}")
    print("→ contribuições (último quarto): "
          + ", ".join(f"{k[2:]}={v:.1%}" for k, v in contrib.items()))
    return 0


def _deconv_classic(method: str, hr: np.ndarray, delta: int, terms: int, filtro: str) -> np.ndarray:
    if method == "taylor":
        return taylor_deconvolve(gaussian_filter(hr, delta), delta)
    if filtro == "box":
        return adm_deconvolve(box_up(hr, delta), box_op(delta), terms)
    return adm_deconvolve(gaussian_filter(hr, delta), gaussian_op(delta), terms)


def cmd_deconv(args) -> int:
    ds = read_dataset(args.data)
    if not 0 <= args.index < len(ds):
        raise ValueError(f"--index {args.index} fora de 0..{len(ds) - 1}")
    if args.method == "gan":
        if not args.checkpoint:
            raise ValueError("--method gan precisa de --checkpoint")
        saida = sample(load_checkpoint(args.checkpoint), ds.lr(args.index), args.count, args.seed)
    else:
        saida = _deconv_classic(args.method, ds.hr(args.index), ds.delta, args.terms, args.filter)[None]
    meta = {"method": args.method, "source": os.fspath(args.data), "index": args.index, "seed": args.seed}
    write_dataset(Dataset(samples=saida, delta=ds.delta, meta=meta), args.out)
    print(f"→ {len(saida)} campo(s) ({args.method}) gravados em {args.out}")
    return 0


def cmd_evaluate(args) -> int:
    ds = read_dataset(args.data)
    if args.count < 2:
        raise ValueError("--count precisa ser >= 2 para a métrica de diversidade")
    idx = np.arange(min(args.n_lr, len(ds)))
    lrs = ds.lr(idx)
    if args.reference == "oracle":
        params = SpectrumParams(slope=_slope(args, ds))
        mf = gaussian_oracle(params, ds.delta, lrs)
        referencias = [MomentField(mf.mean[i], mf.variance[i]) for i in range(len(idx))]
    else:
        media, var = ds.moment_fields(idx)
        referencias = [MomentField(media[i], var[i]) for i in range(len(idx))]

    if args.method == "gan":
        if not args.checkpoint:
            raise ValueError("--method gan precisa de --checkpoint")
        ck = load_checkpoint(args.checkpoint)
        ensembles = [sample(ck, lrs[i], args.count, args.seed + i) for i in range(len(idx))]
    elif args.method == "upsample":
        ensembles = [np.repeat(upsample_nearest(lrs[i], ds.delta)[None], args.count, axis=0)
                     for i in range(len(idx))]
    else:
        ensembles = [
            np.repeat(_deconv_classic(args.method, ds.hr(i), ds.delta, args.terms, "gaussian")[None],
                      args.count, axis=0)
            for i in idx
        ]

    rep = build_report(ensembles, list(lrs), referencias, ds.delta, args.bins)
    arquivos = emit_report(rep, args.out)
    print(f"→ diversidade {rep.diversity_pct:.2f} ± {rep.diversity_stderr:.2f}% | "
          f"consistência {rep.consistency_pct:.2f} ± {rep.consistency_stderr:.2f}%")
    if args.figures:
        emit_figures({args.method: rep}, args.figures)
        arquivos.append(args.figures)
    print("→ " + ", ".join(arquivos))
    return 0


def cmd_oracle(args) -> int:
    ds = read_dataset(args.data)
    params = SpectrumParams(slope=_slope(args, ds))
    mf = gaussian_oracle(params, ds.delta, ds.lr())
    write_dataset(attach_moments(ds, mf.mean, mf.variance), args.out)
    print(f"→ momentos do oráculo (slope={params.slope:.4g}) anexados a {len(ds)} amostra(s): {args.out}")
    return 0


# ── Parser ────────────────────────────────────────────────────────────────────

def build_parser() -> tuple[argparse.ArgumentParser, dict[str, argparse.ArgumentParser]]:
    comum = argparse.ArgumentParser(add_help=False)
    comum.add_argument("--seed", type=int, default=0, help="semente de toda a aleatoriedade (padrão: 0)")
    comum.add_argument("--threads", type=int, default=_default_threads(),
                       help="máximo de workers paralelos (padrão: SRDIV_THREADS ou núcleos)")
    comum.add_argument("--config", help="arquivo chave=valor com defaults deste subcomando")
    comum.add_argument("--log-level", default=os.environ.get("SRDIV_LOG_LEVEL", "WARNING").upper(),
                       choices=("DEBUG", "INFO", "WARNING", "ERROR"),
                       help="nível de log (padrão: SRDIV_LOG_LEVEL ou WARNING)")

    ap = argparse.ArgumentParser(
        prog="srdiv",
        description="Momentos condicionais, GAN com perda de diversidade e baselines de deconvolução.",
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    subs = ap.add_subparsers(dest="command", required=True, metavar="SUBCOMANDO")
    p = {}

    s = p["gen-data"] = subs.add_parser("gen-data", parents=[comum], help="gera dataset sintético")
    s.add_argument("--n", type=int, default=1000, help="número de amostras (padrão: 1000)")
    s.add_argument("--size", type=int, default=DEFAULT_SIZE, help=f"H = W, potência de 2 (padrão: {DEFAULT_SIZE})")
    s.add_argument("--delta", type=int, default=DEFAULT_DELTA, help=f"tamanho do filtro Δ (padrão: {DEFAULT_DELTA})")
    s.add_argument("--slope", type=float, default=-5.0 / 3.0, help="inclinação de E(k) (padrão: −5/3)")
    s.add_argument("--warp", type=float, default=0.0, help="deformação tanh em [0, 1] (padrão: 0)")
    s.add_argument("--out", required=True, help="arquivo CGF1 de saída")
    s.set_defaults(func=cmd_gen_data)

    s = p["fit-moments"] = subs.add_parser("fit-moments", parents=[comum],
                                           help="ajusta média e variância condicionais")
    s.add_argument("--data", required=True, help="dataset de treino (CGF1)")
    s.add_argument("--estimator", choices=("stochastic", "network"), default="stochastic",
                   help="estimação estocástica ou rede (padrão: stochastic)")
    s.add_argument("--model", type=int, default=3, help="modelo da base 0–14 (padrão: 3)")
    s.add_argument("--linear-only", action="store_true", help="só os termos lineares do modelo")
    s.add_argument("--ridge", type=float, default=DEFAULT_RIDGE, help=f"ridge relativo (padrão: {DEFAULT_RIDGE})")
    s.add_argument("--tie-offsets", action="store_true",
                   help="coeficientes compartilhados entre células interiores")
    s.add_argument("--arch", type=_arch, default=(2, 4), help="rede: 'blocos,filtros' (padrão: 2,4)")
    s.add_argument("--epochs", type=int, default=20, help="rede: épocas (padrão: 20)")
    s.add_argument("--batch-size", type=int, default=64, help="rede: lote (padrão: 64)")
    s.add_argument("--lr", type=float, default=1e-3, help="rede: taxa de aprendizado (padrão: 1e-3)")
    s.add_argument("--out-model", help="prefixo dos modelos gravados (.p1/.p2)")
    s.add_argument("--out-data", help="grava o dataset de treino com os momentos anexados")
    s.add_argument("--attach", nargs=2, action="append", metavar=("ENTRADA", "SAIDA"),
                   help="anexa os momentos a outro dataset (repetível)")
    s.set_defaults(func=cmd_fit_moments)

    s = p["sweep-basis"] = subs.add_parser("sweep-basis", parents=[comum], help="varredura de modelos")
    s.add_argument("--data", required=True, help="dataset (CGF1)")
    s.add_argument("--valid", help="dataset de validação; sem ele, --data é dividido")
    s.add_argument("--fraction", type=float, default=DEFAULT_TRAIN_FRACTION,
                   help=f"fração de treino na divisão (padrão: {DEFAULT_TRAIN_FRACTION})")
    s.add_argument("--p", type=int, choices=(1, 2), default=1, help="ordem do momento (padrão: 1)")
    s.add_argument("--models", type=parse_model_list, default=list(range(N_MODELS)),
                   help="ex.: 0..14 ou 0,3,6 (padrão: todos)")
    s.add_argument("--linear-only", action="store_true", help="só termos lineares")
    s.add_argument("--ridge", type=float, default=DEFAULT_RIDGE, help=f"ridge relativo (padrão: {DEFAULT_RIDGE})")
    s.add_argument("--out", help="CSV do relatório")
    s.set_defaults(func=cmd_sweep_basis)

    s = p["train"] = subs.add_parser("train", parents=[comum], help="treina o GAN")
    s.add_argument("--data", required=True, help="dataset com momentos anexados (CGF1)")
    s.add_argument("--variant", choices=VARIANTS, default="diversity", help="regularizador (padrão: diversity)")
    s.add_argument("--steps", type=int, default=2000, help="passos (padrão: 2000)")
    s.add_argument("--m", type=int, default=4, help="campos LR por passo (padrão: 4)")
    s.add_argument("--r", type=int, default=8, help="amostras por LR (padrão: 8)")
    s.add_argument("--alpha", type=float, default=1.0, help="peso do conteúdo (padrão: 1)")
    s.add_argument("--beta", type=float, default=0.01, help="peso adversarial (padrão: 0.01)")
    s.add_argument("--gamma", type=float, default=1.0, help="peso do regularizador (padrão: 1)")
    s.add_argument("--lr-g", type=float, default=1e-3, help="taxa de aprendizado do gerador")
    s.add_argument("--lr-d", type=float, default=1e-3, help="taxa de aprendizado do discriminador")
    s.add_argument("--noise", type=int, default=4, help="canais de ruído (padrão: 4)")
    s.add_argument("--blocks", type=int, default=4, help="blocos residuais (padrão: 4)")
    s.add_argument("--filters", type=int, default=16, help="filtros (padrão: 16)")
    s.add_argument("--out", required=True, help="checkpoint CGG1 de saída")
    s.add_argument("--log", help="CSV do TrainLog (padrão: <out>.log.csv)")
    s.set_defaults(func=cmd_train)

    s = p["deconv"] = subs.add_parser("deconv", parents=[comum], help="deconvolução de um campo")
    s.add_argument("--method", choices=("adm", "taylor", "gan"), required=True, help="método")
    s.add_argument("--data", required=True, help="dataset de origem (CGF1)")
    s.add_argument("--index", type=int, default=0, help="amostra do dataset (padrão: 0)")
    s.add_argument("--terms", type=int, default=DEFAULT_ADM_TERMS, help="ADM: termos da série (padrão: 5)")
    s.add_argument("--filter", choices=("gaussian", "box"), default="gaussian",
                   help="ADM: filtro de observação (padrão: gaussian)")
    s.add_argument("--checkpoint", help="GAN: checkpoint CGG1")
    s.add_argument("--count", type=int, default=8, help="GAN: amostras (padrão: 8)")
    s.add_argument("--out", required=True, help="CGF1 com os campos reconstruídos")
    s.set_defaults(func=cmd_deconv)

    s = p["evaluate"] = subs.add_parser("evaluate", parents=[comum], help="métricas e relatório")
    s.add_argument("--data", required=True, help="dataset de validação (CGF1)")
    s.add_argument("--method", choices=("gan", "upsample", "adm", "taylor"), default="gan",
                   help="gerador das amostras (padrão: gan)")
    s.add_argument("--checkpoint", help="GAN: checkpoint CGG1")
    s.add_argument("--reference", choices=("attached", "oracle"), default="attached",
                   help="σ de referência: momentos anexados ou oráculo gaussiano")
    s.add_argument("--slope", type=float, help="oráculo: inclinação do espectro (padrão: metadados)")
    s.add_argument("--n-lr", type=int, default=50, help="campos LR avaliados (padrão: 50)")
    s.add_argument("--count", type=int, default=8, help="amostras por LR (padrão: 8)")
    s.add_argument("--terms", type=int, default=DEFAULT_ADM_TERMS, help="ADM: termos da série")
    s.add_argument("--bins", type=int, default=DEFAULT_BINS, help=f"bins dos histogramas (padrão: {DEFAULT_BINS})")
    s.add_argument("--out", required=True, help="relatório JSON (CSVs ao lado)")
    s.add_argument("--figures", help="HTML com as figuras (plotly)")
    s.set_defaults(func=cmd_evaluate)

    s = p["oracle"] = subs.add_parser("oracle", parents=[comum], help="momentos gaussianos exatos")
    s.add_argument("--data", required=True, help="dataset gaussiano (warp=0)")
    s.add_argument("--slope", type=float, help="inclinação do espectro (padrão: metadados)")
    s.add_argument("--out", required=True, help="CGF1 com os momentos anexados")
    s.set_defaults(func=cmd_oracle)

    return ap, p


def _parse(argv) -> argparse.Namespace:
    ap, subparsers = build_parser()
    # Primeira passada só para achar o subcomando e o --config: os obrigatórios
    # podem vir do arquivo e são cobrados na segunda.
    obrigatorios = [a for sub in subparsers.values() for a in sub._actions if a.required]
    for a in obrigatorios:
        a.required = False
    args = ap.parse_args(argv)
    for a in obrigatorios:
        a.required = True
    if args.config:
        try:
            cfg = read_config(args.config)
        except (OSError, ValueError) as e:
            subparsers[args.command].error(f"--config: {e}")
        _apply_config(subparsers[args.command], cfg)
    return ap.parse_args(argv)


def run(argv=None) -> int:
    try:
        args = _parse(argv)
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else 2
    logging.basicConfig(level=args.log_level, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (SrDivError, OSError, ValueError) as e:
        print(f"ERRO: {e}", file=sys.stderr)
        return 1


def main() -> int:
    load_dotenv()
    return run(sys.argv[1:])


if __name__ == "__main__":
    sys.exit(main())
