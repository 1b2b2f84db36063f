"""
gan.py — GAN condicional com perda de diversidade (casamento de momentos).

O gerador recebe LR [n, 2, h, w] + ruído uniforme [−1, 1] e devolve o campo
subfiltro; o SR é up(LR) + SF. O discriminador vê campos HR/SR completos.

Perda do gerador: L_G = α·conteúdo + β·adversarial + γ·regularizador, onde o
regularizador depende da variante:

  diversity  distância de Fréchet diagonal entre os momentos das r amostras
             e os momentos condicionais anexados ao dataset
  dsgan      −E min(‖ΔSR‖/‖Δz‖, τ), τ = ‖σ‖/‖σ(z)‖
  gensim     −E σ̂ das amostras (γ limitado a 0,01)
  none       sem regularizador

Cada perda tem uma versão `*_grad` que devolve (valor, ∂L/∂amostras).
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import pandas as pd

from autonet import (
    AdamHyper,
    NetworkParams,
    adam_step,
    append_noise,
    build_network,
    conv3x3,
    d2s,
    dense,
    leaky_relu,
    net_backward,
    net_forward,
    network_bytes,
    network_from_bytes,
    relu,
    residual_block,
    sigmoid,
)
from errors import (
    DatasetFormatError,
    FieldShapeError,
    MissingMomentsError,
    NonFiniteError,
    TrainingDivergedError,
)
from filters import box_filter_coarsen, upsample_nearest
from grid import Dataset
from moments import MomentField

EPS_LOG = 1e-7
NOISE_STD = 1.0 / math.sqrt(3.0)  # desvio de uniforme[−1, 1]
GENSIM_GAMMA_CAP = 0.01
VARIANTS = ("diversity", "dsgan", "gensim", "none")

CHECKPOINT_MAGIC = b"CGG1"
CHECKPOINT_VERSION = 1


# ── Configuração ──────────────────────────────────────────────────────────────

@dataclass(frozen=True)
class LossWeights:
    alpha: float = 1.0
    beta: float = 0.01
    gamma: float = 1.0

    def __post_init__(self):
        for nome, v in asdict(self).items():
            if not v >= 0:
                raise ValueError(f"peso {nome} deve ser >= 0, recebido {v}")


@dataclass(frozen=True)
class BalanceRule:
    theta_lo: float = 0.45 * math.log(2.0)
    theta_hi: float = 2.0 * math.log(2.0)
    k_max: int = 5


@dataclass(frozen=True)
class TrainConfig:
    m: int = 4
    r: int = 8
    steps: int = 2000
    seed: int = 0
    variant: str = "diversity"
    adam_g: AdamHyper = AdamHyper(lr=1e-3, beta1=0.5)
    adam_d: AdamHyper = AdamHyper(lr=1e-3, beta1=0.5)
    balance: BalanceRule = BalanceRule()
    noise_channels: int = 4
    blocks: int = 4
    filters: int = 16
    log_every: int = 100

    def __post_init__(self):
        if self.m < 1 or self.r < 1 or self.steps < 1:
            raise ValueError(f"m, r e steps devem ser >= 1 (m={self.m}, r={self.r}, steps={self.steps})")
        if self.variant not in VARIANTS:
            raise ValueError(f"variante desconhecida: {self.variant!r} (use {', '.join(VARIANTS)})")
        if self.variant != "none" and self.r < 2:
            raise ValueError(f"variante {self.variant} precisa de r >= 2")
        if self.filters <= self.noise_channels:
            raise ValueError("filters deve ser maior que noise_channels")


# ── Redes ─────────────────────────────────────────────────────────────────────

def generator_layers(delta: int, noise_channels: int = 4, blocks: int = 4, filters: int = 16) -> list:
    """LR + ruído → SF; log2(Δ) estágios de depth_to_space(2)."""
    estagios = int(round(math.log2(delta))) if delta >= 1 else -1
    if estagios < 0 or 2**estagios != delta:
        raise FieldShapeError(f"gerador precisa de Δ potência de 2, recebido {delta}")
    layers = [conv3x3(2, filters - noise_channels), append_noise(noise_channels)]
    layers += [residual_block(filters) for _ in range(blocks)]
    for _ in range(estagios):
        layers += [conv3x3(filters, 4 * filters), d2s(2), relu()]
    layers.append(conv3x3(filters, 2))
    return layers


def discriminator_layers(H: int, W: int) -> list:
    larguras = (2, 4, 8, 8, 8)
    layers = []
    for a, b in zip(larguras, larguras[1:]):
        layers += [conv3x3(a, b), leaky_relu(0.2)]
    layers += [dense(8 * H * W, 32), leaky_relu(0.2), dense(32, 1), sigmoid()]
    return layers


@dataclass
class GanCheckpoint:
    generator: NetworkParams
    discriminator: NetworkParams
    delta: int
    noise_channels: int


def checkpoint_bytes(ck: GanCheckpoint) -> bytes:
    g, d = network_bytes(ck.generator), network_bytes(ck.discriminator)
    cab = np.array([CHECKPOINT_VERSION, ck.delta, ck.noise_channels], dtype="<u4").tobytes()
    return (
        CHECKPOINT_MAGIC + cab
        + np.array([len(g)], dtype="<u8").tobytes() + g
        + np.array([len(d)], dtype="<u8").tobytes() + d
    )


def save_checkpoint(ck: GanCheckpoint, path) -> None:
    with open(path, "wb") as fh:
        fh.write(checkpoint_bytes(ck))


def load_checkpoint(path) -> GanCheckpoint:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise DatasetFormatError(f"bad magic: {raw[:4]!r} em {path} (esperado {CHECKPOINT_MAGIC!r})")
    if len(raw) < 16:
        raise DatasetFormatError(f"truncated payload: cabeçalho incompleto em {path}")
    version, delta, k = (int(x) for x in np.frombuffer(raw, dtype="<u4", count=3, offset=4))
    if version != CHECKPOINT_VERSION:
        raise DatasetFormatError(f"versão CGG1 não suportada: {version}")
    pos = 16
    redes = []
    for _ in range(2):
        if len(raw) < pos + 8:
            raise DatasetFormatError(f"truncated payload: rede ausente em {path}")
        tam = int(np.frombuffer(raw, dtype="<u8", count=1, offset=pos)[0])
        pos += 8
        if len(raw) < pos + tam:
            raise DatasetFormatError(f"truncated payload: rede declara {tam} bytes em {path}")
        rede, fim = network_from_bytes(raw[:pos + tam], pos)
        if fim != pos + tam:
            raise DatasetFormatError(f"rede embutida com tamanho inconsistente em {path}")
        redes.append(rede)
        pos = fim
    if pos != len(raw):
        raise DatasetFormatError(f"{len(raw) - pos} bytes sobrando depois do checkpoint")
    return GanCheckpoint(generator=redes[0], discriminator=redes[1], delta=delta, noise_channels=k)


# ── Perdas ────────────────────────────────────────────────────────────────────

def _clamp(p):
    return np.clip(np.asarray(p, dtype=np.float64), EPS_LOG, 1.0 - EPS_LOG)


def adversarial_losses(d_real, d_fake) -> tuple[float, float]:
    """(L_D, L_advG) médios no lote, com probabilidades limitadas a [ε, 1−ε]."""
    d_real, d_fake = _clamp(d_real), _clamp(d_fake)
    if d_real.size == 0 or d_fake.size == 0:
        raise ValueError("adversarial_losses: lote vazio")
    l_d = -float(np.mean(np.log1p(-d_fake))) - float(np.mean(np.log(d_real)))
    l_g = -float(np.mean(np.log(d_fake)))
    return l_d, l_g


def _livre(p) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    return (p > EPS_LOG) & (p < 1.0 - EPS_LOG)


def adversarial_grad_d(d_real, d_fake) -> tuple[np.ndarray, np.ndarray]:
    """∂L_D/∂p para reais e gerados; zero onde a probabilidade caiu no limite."""
    cr, cf = _clamp(d_real), _clamp(d_fake)
    g_real = np.where(_livre(d_real), -1.0 / (cr.size * cr), 0.0)
    g_fake = np.where(_livre(d_fake), 1.0 / (cf.size * (1.0 - cf)), 0.0)
    return g_real, g_fake


def adversarial_grad_g(d_fake) -> np.ndarray:
    """∂L_advG/∂p, com a mesma máscara do limite."""
    cf = _clamp(d_fake)
    return np.where(_livre(d_fake), -1.0 / (cf.size * cf), 0.0)


def _as_ensemble(samples, nome="amostras") -> np.ndarray:
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim != 4 or x.shape[1] != 2:
        raise FieldShapeError(f"{nome}: esperado [r, 2, H, W], recebido {x.shape}")
    return x


def content_loss_grad(sr_batch, lr_batch, delta: int) -> tuple[float, np.ndarray]:
    sr = _as_ensemble(sr_batch, "sr")
    lr = np.broadcast_to(np.asarray(lr_batch, dtype=np.float64), (len(sr), *np.shape(lr_batch)[-3:]))
    if lr.shape[-2] * delta != sr.shape[-2] or lr.shape[-1] * delta != sr.shape[-1]:
        raise FieldShapeError(f"sr {sr.shape} incompatível com lr {lr.shape} e Δ={delta}")
    erro = box_filter_coarsen(sr, delta) - lr
    normas = np.sqrt(np.sum(erro**2, axis=(1, 2, 3)))
    n = len(sr)
    g_erro = np.divide(erro, normas[:, None, None, None], out=np.zeros_like(erro),
                       where=normas[:, None, None, None] > 0) / n
    # Adjunto da média em blocos: espalha e divide por Δ².
    return float(normas.mean()), upsample_nearest(g_erro, delta) / (delta * delta)


def content_loss(sr_batch, lr_batch, delta: int) -> float:
    """Média de ‖g(sr) − lr‖₂ sobre o lote (norma, não o quadrado)."""
    return content_loss_grad(sr_batch, lr_batch, delta)[0]


def frechet_diagonal(mu1, var1, mu2, var2) -> float:
    """‖μ₁−μ₂‖² + Σ(σ₁−σ₂)²: Fréchet entre gaussianas de covariância diagonal."""
    s1 = np.sqrt(np.maximum(var1, 0.0))
    s2 = np.sqrt(np.maximum(var2, 0.0))
    return float(np.sum((np.asarray(mu1) - mu2) ** 2) + np.sum((s1 - s2) ** 2))


def _sample_moments(x):
    mu = x.mean(axis=0)
    dev = x - mu
    sigma = np.sqrt(np.mean(dev**2, axis=0))
    return mu, dev, sigma


def diversity_loss_grad(sf_samples, mf) -> tuple[float, np.ndarray]:
    x = _as_ensemble(sf_samples, "sf_samples")
    r = len(x)
    if r < 2:
        raise ValueError(f"diversity_loss precisa de r >= 2 amostras, recebido {r}")
    if np.any(np.asarray(mf.variance) < 0):
        raise ValueError("variância do campo de momentos negativa")
    mu, dev, sigma = _sample_moments(x)
    alvo_sigma = np.sqrt(mf.variance)
    d_mu = mu - mf.mean
    d_sigma = sigma - alvo_sigma
    valor = math.sqrt(float(np.sum(d_mu**2) + np.sum(d_sigma**2)))
    if valor == 0.0:
        return 0.0, np.zeros_like(x)
    # ∂σ̂/∂x_i = (x_i − μ̂)/(r·σ̂); nulo onde σ̂ = 0 (desvios também são nulos).
    fator = np.divide(d_sigma, sigma, out=np.zeros_like(sigma), where=sigma > 0)
    grad = (d_mu[None] + dev * fator[None]) / (r * valor)
    return valor, grad


def diversity_loss(sf_samples, mf) -> float:
    """√Fréchet entre os momentos amostrais (1/r) das r amostras SF e o MomentField."""
    return diversity_loss_grad(sf_samples, mf)[0]


def dsgan_tau(variance, n_noise: int) -> float:
    """τ = ‖σ(SF|LR)‖₂ / ‖σ(z)‖₂ com z uniforme[−1, 1] de n_noise entradas."""
    return float(np.sqrt(np.sum(np.maximum(variance, 0.0)))) / (NOISE_STD * math.sqrt(n_noise))


def dsgan_loss_grad(sr_a, sr_b, z_a, z_b, tau: float) -> tuple[float, np.ndarray, np.ndarray]:
    a, b = np.asarray(sr_a, dtype=np.float64), np.asarray(sr_b, dtype=np.float64)
    za, zb = np.asarray(z_a, dtype=np.float64), np.asarray(z_b, dtype=np.float64)
    if a.shape != b.shape or za.shape != zb.shape:
        raise FieldShapeError(f"pares com formas diferentes: {a.shape}/{b.shape}, {za.shape}/{zb.shape}")
    if a.ndim == 3:
        a, b, za, zb = a[None], b[None], za[None], zb[None]
    n = len(a)
    eixos_sr = tuple(range(1, a.ndim))
    eixos_z = tuple(range(1, za.ndim))
    dz = np.sqrt(np.sum((za - zb) ** 2, axis=eixos_z))
    if np.any(dz == 0):
        raise ValueError("dsgan_loss: vetores de ruído coincidentes")
    diff = a - b
    dsr = np.sqrt(np.sum(diff**2, axis=eixos_sr))
    razao = dsr / dz
    valor = -float(np.mean(np.minimum(razao, tau)))
    ativo = (razao < tau) & (dsr > 0)
    escala = np.where(ativo, -1.0 / (n * dz * np.where(dsr > 0, dsr, 1.0)), 0.0)
    ga = diff * escala.reshape((n,) + (1,) * (a.ndim - 1))
    if np.ndim(sr_a) == 3:
        return valor, ga[0], -ga[0]
    return valor, ga, -ga


def dsgan_loss(sr_a, sr_b, z_a, z_b, tau: float) -> float:
    return dsgan_loss_grad(sr_a, sr_b, z_a, z_b, tau)[0]


def gensim_loss_grad(sr_samples) -> tuple[float, np.ndarray]:
    x = _as_ensemble(sr_samples, "sr_samples")
    r = len(x)
    if r < 2:
        raise ValueError(f"gensim_loss precisa de r >= 2 amostras, recebido {r}")
    _, dev, sigma = _sample_moments(x)
    P = sigma.size
    inv = np.divide(1.0, sigma, out=np.zeros_like(sigma), where=sigma > 0)
    return -float(sigma.mean()), -dev * inv[None] / (r * P)


def gensim_loss(sr_samples) -> float:
    """−média por pixel do desvio-padrão amostral (1/r)."""
    return gensim_loss_grad(sr_samples)[0]


# ── Log de treino ─────────────────────────────────────────────────────────────

LOG_COLUMNS = ["step", "l_content", "l_adv_g", "l_adv_d", "l_div", "action",
               "c_content", "c_adv", "c_div"]


@dataclass
class TrainLog:
    rows: list[dict] = field(default_factory=list)

    def append(self, **row) -> None:
        self.rows.append(row)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.rows, columns=LOG_COLUMNS)

    def write_csv(self, path) -> None:
        self.to_frame().to_csv(path, index=False, float_format="%.17g")

    def mean_contributions(self, last: int | None = None) -> dict[str, float]:
        df = self.to_frame()
        if last:
            df = df.tail(last)
        return {c: float(df[c].mean()) for c in ("c_content", "c_adv", "c_div")}


def _contributions(termos: tuple[float, float, float]) -> tuple[float, float, float]:
    absol = [abs(t) for t in termos]
    total = sum(absol)
    if total == 0:
        return (1 / 3, 1 / 3, 1 / 3)
    return tuple(a / total for a in absol)


# ── Treino ────────────────────────────────────────────────────────────────────

class _Balancer:
    """Decide quem treina no passo: 'both', 'g_only' ou 'd_only'."""

    def __init__(self, rule: BalanceRule):
        self.rule = rule
        self.pulos_d = 0
        self.pulos_g = 0

    def decide(self, l_adv_g: float | None) -> str:
        if l_adv_g is not None and l_adv_g > self.rule.theta_hi and self.pulos_d < self.rule.k_max:
            self.pulos_d += 1
            self.pulos_g = 0
            return "g_only"
        if l_adv_g is not None and l_adv_g < self.rule.theta_lo and self.pulos_g < self.rule.k_max:
            self.pulos_g += 1
            self.pulos_d = 0
            return "d_only"
        self.pulos_d = self.pulos_g = 0
        return "both"


def _regularizer(variant, sf, z, lr_idx_moments, r, m):
    """Valor e gradiente do termo γ, somados por LR e divididos por m.

    No dsgan, ‖σ(z)‖ cobre todas as k·h·w entradas de ruído de uma amostra,
    as mesmas sobre as quais ‖Δz‖ é medido.
    """
    if variant == "none":
        return 0.0, np.zeros_like(sf)
    total, grad = 0.0, np.zeros_like(sf)
    for j in range(m):
        bloco = slice(j * r, (j + 1) * r)
        if variant == "diversity":
            v, g = diversity_loss_grad(sf[bloco], lr_idx_moments[j])
            grad[bloco] = g / m
        elif variant == "gensim":
            v, g = gensim_loss_grad(sf[bloco])
            grad[bloco] = g / m
        else:
            meio = r // 2
            ia = np.arange(j * r, j * r + meio)
            ib = ia + meio
            tau = dsgan_tau(lr_idx_moments[j].variance, z[0].size)
            v, ga, gb = dsgan_loss_grad(sf[ia], sf[ib], z[ia], z[ib], tau)
            grad[ia] += ga / m
            grad[ib] += gb / m
        total += v
    return total / m, grad


def train(cfg: TrainConfig, ds: Dataset, weights: LossWeights = LossWeights()) -> tuple[GanCheckpoint, TrainLog]:
    """Treino alternado G/D com balanceamento; determinístico dado cfg.seed."""
    precisa_momentos = cfg.variant in ("diversity", "dsgan")
    if precisa_momentos and ds.moments is None:
        raise MissingMomentsError(f"variante {cfg.variant} precisa de campos de momento anexados ao dataset")
    gamma = min(weights.gamma, GENSIM_GAMMA_CAP) if cfg.variant == "gensim" else weights.gamma
    d = ds.delta
    H, W = ds.shape
    h, w = H // d, W // d
    m, r, k = cfg.m, cfg.r, cfg.noise_channels

    G = build_network(generator_layers(d, k, cfg.blocks, cfg.filters), seed=cfg.seed)
    D = build_network(discriminator_layers(H, W), seed=cfg.seed + 1)
    estado_g = estado_d = None
    rng = np.random.default_rng([cfg.seed, 2])
    balanca = _Balancer(cfg.balance)
    log = TrainLog()
    ultimo_adv_g = None
    n = len(ds)
    logging.info(
        f"train: variante={cfg.variant}, m={m}, r={r}, {cfg.steps} passos, "
        f"G {G.n_params()} / D {D.n_params()} parâmetros"
    )

    for passo in range(1, cfg.steps + 1):
        idx = rng.choice(n, size=m, replace=m > n)
        idx_real = rng.integers(0, n, size=r * m)
        z = rng.uniform(-1.0, 1.0, size=(r * m, k, h, w))
        acao = balanca.decide(ultimo_adv_g)

        lr = ds.lr(idx)
        lr_rep = np.repeat(lr, r, axis=0)
        real = ds.hr(idx_real)
        momentos = []
        if precisa_momentos:
            media, var = ds.moment_fields(idx)
            momentos = [MomentField(mean=media[j], variance=var[j]) for j in range(m)]

        try:
            with np.errstate(over="ignore", invalid="ignore"):
                treina_g = acao != "d_only"
                sf, tape_g = net_forward(G, lr_rep, noise=z, record=treina_g)
                sr = upsample_nearest(lr_rep, d) + sf

                # Discriminador: r·m reais + r·m gerados.
                treina_d = acao != "g_only"
                probs, tape_d = net_forward(D, np.concatenate([real, sr]), record=treina_d)
                p_real, p_fake = probs[: r * m, 0], probs[r * m:, 0]
                l_d, l_adv_g = adversarial_losses(p_real, p_fake)
                if treina_d:
                    g_probs = np.concatenate(adversarial_grad_d(p_real, p_fake))
                    g_d = net_backward(D, tape_d, g_probs[:, None])
                    D, estado_d = adam_step(D, g_d, estado_d, cfg.adam_d)

                l_content, g_content = content_loss_grad(sr, lr_rep, d)
                l_div, g_div = _regularizer(cfg.variant, sf, z, momentos, r, m)
                if treina_g:
                    pf, tape_f = net_forward(D, sr, record=True)
                    g_adv = net_backward(D, tape_f, adversarial_grad_g(pf[:, 0])[:, None]).input
                    g_sf = weights.alpha * g_content + weights.beta * g_adv + gamma * g_div
                    g_g = net_backward(G, tape_g, g_sf)
                    G, estado_g = adam_step(G, g_g, estado_g, cfg.adam_g)
        except NonFiniteError as e:
            raise TrainingDivergedError(f"treino divergiu no passo {passo} ({acao}): {e}") from e

        perdas = (l_content, l_adv_g, l_d, l_div)
        if not all(math.isfinite(v) for v in perdas):
            raise TrainingDivergedError(
                f"perda não finita no passo {passo}: content={l_content} adv_g={l_adv_g} "
                f"adv_d={l_d} div={l_div}"
            )
        cc, ca, cd = _contributions((weights.alpha * l_content, weights.beta * l_adv_g, gamma * l_div))
        log.append(step=passo, l_content=l_content, l_adv_g=l_adv_g, l_adv_d=l_d, l_div=l_div,
                   action=acao, c_content=cc, c_adv=ca, c_div=cd)
        ultimo_adv_g = l_adv_g
        if cfg.log_every and passo % cfg.log_every == 0:
            logging.info(
                f"train: passo {passo} content={l_content:.4g} adv_g={l_adv_g:.4g} "
                f"adv_d={l_d:.4g} div={l_div:.4g} ({acao})"
            )

    ck = GanCheckpoint(generator=G, discriminator=D, delta=d, noise_channels=k)
    return ck, log


# ── Amostragem ────────────────────────────────────────────────────────────────

def sample(checkpoint: GanCheckpoint, lr: np.ndarray, count: int, seed: int) -> np.ndarray:
    """count campos SR [count, 2, H, W] para um único LR [2, h, w]."""
    lr = np.asarray(lr, dtype=np.float64)
    if lr.ndim != 3 or lr.shape[0] != 2:
        raise FieldShapeError(f"LR esperado [2, h, w], recebido {lr.shape}")
    if count < 1:
        raise ValueError(f"count deve ser >= 1, recebido {count}")
    rng = np.random.default_rng(seed)
    _, h, w = lr.shape
    z = rng.uniform(-1.0, 1.0, size=(count, checkpoint.noise_channels, h, w))
    lr_rep = np.repeat(lr[None], count, axis=0)
    sf, _ = net_forward(checkpoint.generator, lr_rep, noise=z)
    return upsample_nearest(lr_rep, checkpoint.delta) + sf
