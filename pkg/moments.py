"""
moments.py — Estimação dos momentos condicionais E(SF|LR) e σ²(SF|LR).

Três estimadores, todos com `predict(lr) -> [n, 2, H, W]`:

  - MomentModel: estimação estocástica por pixel, mínimos quadrados numa base
    de termos do estêncil 5×5 LR (escada de 15 modelos, 2 a 293 termos);
  - MomentNetwork: rede totalmente convolucional (autonet) treinada por MSE;
  - gaussian_oracle: momentos exatos de um campo gaussiano estacionário
    observado pelo box filter (validação em dado sintético com warp=0).

O segundo momento é sempre centrado: o alvo de p=2 é (SF − média estimada)²,
então o que sai é a variância condicional.

Estêncil (dy, dx relativos à célula LR N0, sentido horário a partir do norte):
  N1  4 vizinhos de aresta       C1  4 cantos do anel 1
  C2  4 cantos do anel 2         N2  12 células restantes do anel 2
"adj" é a próxima célula da mesma classe no sentido horário; "opp" é a
reflexão por N0, cada par contado uma vez.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
import pandas as pd
from scipy import linalg

from autonet import (
    AdamHyper,
    NetworkParams,
    adam_step,
    build_network,
    conv3x3,
    d2s,
    load_network,
    net_backward,
    net_forward,
    relu,
    residual_block,
    save_network,
)
from errors import (
    DatasetFormatError,
    FieldShapeError,
    MomentFitError,
    NonFiniteError,
    OracleError,
    TrainingDivergedError,
)
from grid import Dataset, SpectrumParams, sf_decompose, split_dataset
from filters import upsample_nearest

EPS_VAR = 1e-12
DEFAULT_RIDGE = 1e-8
TERM_COUNTS = (2, 4, 5, 13, 21, 37, 53, 77, 85, 133, 149, 173, 197, 261, 293)
N_MODELS = len(TERM_COUNTS)
SWEEP_TOLERANCE = 0.005
NETWORK_LADDER = ((2, 4), (4, 8), (8, 16))
NETWORK_TOLERANCE = 0.02
ORACLE_MAX_PIXELS = 1024
_CHUNK = 2048

MODEL_MAGIC = b"CGM1"
MODEL_VERSION = 1


# ── Estêncil ──────────────────────────────────────────────────────────────────

N1 = ((-1, 0), (0, 1), (1, 0), (0, -1))
C1 = ((-1, 1), (1, 1), (1, -1), (-1, -1))
C2 = ((-2, 2), (2, 2), (2, -2), (-2, -2))
N2 = (
    (-2, -1), (-2, 0), (-2, 1), (-1, 2), (0, 2), (1, 2),
    (2, 1), (2, 0), (2, -1), (1, -2), (0, -2), (-1, -2),
)
_ONE = 50  # posição do 1 constante no vetor achatado do estêncil


def _label(dy: int, dx: int) -> str:
    anel = max(abs(dy), abs(dx))
    if anel == 0:
        return "N0"
    if anel == 1:
        return "N1" if abs(dy) + abs(dx) == 1 else "C1"
    return "C2" if abs(dy) == abs(dx) == 2 else "N2"


STENCIL_LABELS = np.array([[_label(dy, dx) for dx in range(-2, 3)] for dy in range(-2, 3)])


@dataclass
class StencilNeighborhood:
    """Bloco 5×5×2 de velocidades LR; values[dy+2, dx+2, componente]."""

    values: np.ndarray
    labels: np.ndarray = field(default_factory=lambda: STENCIL_LABELS.copy())

    def flat(self) -> np.ndarray:
        return np.append(self.values.reshape(50), 1.0)


def _pad_lr(lr: np.ndarray) -> np.ndarray:
    # Gradiente nulo na borda: replica a célula mais próxima do domínio.
    pad = [(0, 0)] * (lr.ndim - 2) + [(2, 2), (2, 2)]
    return np.pad(lr, pad, mode="edge")


def build_stencil(lr: np.ndarray, pixel: tuple[int, int], delta: int) -> StencilNeighborhood:
    """Vizinhança 5×5 da célula LR que contém o pixel HR (linha, coluna)."""
    lr = np.asarray(lr, dtype=np.float64)
    if lr.ndim != 3 or lr.shape[0] != 2:
        raise FieldShapeError(f"LR esperado [2, h, w], recebido {lr.shape}")
    r, c = pixel
    H, W = lr.shape[1] * delta, lr.shape[2] * delta
    if not (0 <= r < H and 0 <= c < W):
        raise FieldShapeError(f"pixel {pixel} fora da grade HR {H}×{W}")
    I, J = r // delta, c // delta
    bloco = _pad_lr(lr)[:, I:I + 5, J:J + 5]
    return StencilNeighborhood(values=bloco.transpose(1, 2, 0).copy())


# ── Base de termos ────────────────────────────────────────────────────────────

def _idx(dy: int, dx: int, comp: int) -> int:
    return (dy + 2) * 10 + (dx + 2) * 2 + comp


def _linear(cells):
    return [(_idx(dy, dx, j), _ONE, _ONE) for (dy, dx) in cells for j in range(2)]


def _with_n0(cells):
    return [
        (_idx(0, 0, a), _idx(dy, dx, b), _ONE)
        for (dy, dx) in cells for a in range(2) for b in range(2)
    ]


def _n0_pair(pairs):
    # pairs: lista de (célula_k, célula_l, só_k≤l)
    termos = []
    for ck, cl, triangular in pairs:
        for j in range(2):
            for k in range(2):
                for l in range(2):
                    if triangular and l < k:
                        continue
                    termos.append((_idx(0, 0, j), _idx(*ck, k), _idx(*cl, l)))
    return termos


def _ladder() -> list[list[tuple[int, int, int]]]:
    n0 = (0, 0)
    return [
        _linear([n0]),
        [(_idx(0, 0, j), _idx(0, 0, j), _ONE) for j in range(2)],
        [(_idx(0, 0, 0), _idx(0, 0, 1), _ONE)],
        _linear(N1),
        _linear(C1),
        _with_n0(N1),
        _with_n0(C1),
        _linear(N2),
        _linear(C2),
        _with_n0(N2),
        _with_n0(C2),
        _n0_pair([(c, c, True) for c in N1]),
        _n0_pair([(c, c, True) for c in C1]),
        _n0_pair([(ring[i], ring[(i + 1) % 4], False) for ring in (N1, C1) for i in range(4)]),
        _n0_pair([(ring[i], ring[(i + 2) % 4], False) for ring in (N1, C1) for i in range(2)]),
    ]


@lru_cache(maxsize=None)
def _term_table(model_id: int, linear_only: bool) -> np.ndarray:
    termos = [t for bloco in _ladder()[: model_id + 1] for t in bloco]
    if linear_only:
        termos = [t for t in termos if t[1] == _ONE and t[2] == _ONE]
    tabela = np.array(termos, dtype=np.intp)
    tabela.setflags(write=False)
    return tabela


@dataclass(frozen=True)
class BasisSpec:
    """Modelo da escada (0–14); linear_only mantém só os termos de grau 1."""

    model_id: int
    linear_only: bool = False

    def __post_init__(self):
        if not (isinstance(self.model_id, (int, np.integer)) and 0 <= self.model_id < N_MODELS):
            raise ValueError(f"unknown model_id: {self.model_id!r} (esperado 0–{N_MODELS - 1})")

    @property
    def table(self) -> np.ndarray:
        return _term_table(int(self.model_id), bool(self.linear_only))

    @property
    def q(self) -> int:
        return len(self.table)

    @property
    def label(self) -> str:
        return f"{self.model_id}{'-linear' if self.linear_only else ''}"


def _eval_terms(tabela: np.ndarray, v: np.ndarray) -> np.ndarray:
    return v[..., tabela[:, 0]] * v[..., tabela[:, 1]] * v[..., tabela[:, 2]]


def basis_eval(spec: BasisSpec, st: StencilNeighborhood) -> np.ndarray:
    return _eval_terms(spec.table, st.flat())


def _cell_basis(pad: np.ndarray, I: int, J: int, tabela: np.ndarray) -> np.ndarray:
    """Termos da base para a célula (I, J) de um lote LR já acolchoado: [n, q]."""
    win = pad[:, :, I:I + 5, J:J + 5]
    n = len(win)
    v = np.empty((n, 51))
    v[:, :50] = win.transpose(0, 2, 3, 1).reshape(n, 50)
    v[:, 50] = 1.0
    return _eval_terms(tabela, v)


# ── Modelo ajustado ───────────────────────────────────────────────────────────

def _as_batch(lr: np.ndarray) -> tuple[np.ndarray, bool]:
    lr = np.asarray(lr, dtype=np.float64)
    if lr.ndim == 3:
        return lr[None], True
    if lr.ndim != 4:
        raise FieldShapeError(f"LR esperado [2, h, w] ou [n, 2, h, w], recebido {lr.shape}")
    return lr, False


@dataclass
class MomentModel:
    """Coeficientes por pixel HR e canal SF: f = A + B·(b − média dos termos)."""

    spec: BasisSpec
    p: int
    delta: int
    intercept: np.ndarray  # [H, W, 2]
    coef: np.ndarray  # [H, W, 2, q]
    term_mean: np.ndarray  # [H, W, q]
    centered: bool = False
    train_mse: float = float("nan")

    def __post_init__(self):
        H, W = self.intercept.shape[:2]
        q = self.spec.q
        if self.coef.shape != (H, W, 2, q) or self.term_mean.shape != (H, W, q):
            raise FieldShapeError(
                f"coeficientes {self.coef.shape}/{self.term_mean.shape} incompatíveis "
                f"com {H}×{W} e q={q}"
            )
        if not (np.all(np.isfinite(self.coef)) and np.all(np.isfinite(self.intercept))):
            raise MomentFitError("coeficientes não finitos")

    @property
    def shape(self) -> tuple[int, int]:
        return self.intercept.shape[:2]

    def predict(self, lr: np.ndarray) -> np.ndarray:
        """Momento estimado [n, 2, H, W] (ou [2, H, W] para um único LR)."""
        lr, unico = _as_batch(lr)
        d = self.delta
        H, W = self.shape
        if lr.shape[1] != 2 or lr.shape[2] * d != H or lr.shape[3] * d != W:
            raise FieldShapeError(f"LR {lr.shape} incompatível com modelo {H}×{W}, Δ={d}")
        pad = _pad_lr(lr)
        tabela = self.spec.table
        saida = np.empty((len(lr), 2, H, W))
        for I in range(H // d):
            for J in range(W // d):
                ys, xs = slice(I * d, (I + 1) * d), slice(J * d, (J + 1) * d)
                b = _cell_basis(pad, I, J, tabela) - self.term_mean[I * d, J * d]
                bloco = np.einsum("nq,abcq->ncab", b, self.coef[ys, xs])
                saida[:, :, ys, xs] = bloco + self.intercept[ys, xs].transpose(2, 0, 1)
        return saida[0] if unico else saida


@dataclass
class MomentField:
    mean: np.ndarray
    variance: np.ndarray


# ── Ajuste estocástico ────────────────────────────────────────────────────────

@dataclass
class _CellStats:
    n: int = 0
    sb: np.ndarray | None = None  # soma dos termos, depois média
    st: np.ndarray | None = None
    sbb: np.ndarray | None = None  # somas centradas
    sbt: np.ndarray | None = None
    stt: np.ndarray | None = None


def _cell_targets(alvo: np.ndarray, I: int, J: int, d: int) -> np.ndarray:
    # Colunas na ordem (canal, linha, coluna) do bloco Δ×Δ.
    bloco = alvo[:, :, I * d:(I + 1) * d, J * d:(J + 1) * d]
    return bloco.reshape(len(alvo), 2 * d * d)


def _targets(hr: np.ndarray, delta: int, p: int, center_model) -> tuple[np.ndarray, np.ndarray]:
    lr, sf = sf_decompose(hr, delta)
    if p == 1:
        return lr, sf
    return lr, (sf - center_model.predict(lr)) ** 2


def _chunks(n: int, size: int = _CHUNK):
    for i in range(0, n, size):
        yield slice(i, min(i + size, n))


def _check_order(p: int, center_model) -> None:
    if p not in (1, 2):
        raise ValueError(f"ordem do momento deve ser 1 ou 2, recebido {p}")
    if p == 2 and center_model is None:
        raise ValueError("p=2 precisa de center_model (momento de ordem 1) para centrar os alvos")


def _accumulate(ds: Dataset, p, center_model, tabela, threads) -> list[_CellStats]:
    """Duas passadas em ordem fixa: médias, depois somas centradas."""
    d = ds.delta
    h, w = ds.shape[0] // d, ds.shape[1] // d
    celulas = [(I, J) for I in range(h) for J in range(w)]
    q, T = len(tabela), 2 * d * d
    stats = [
        _CellStats(n=len(ds), sb=np.zeros(q), st=np.zeros(T), sbb=np.zeros((q, q)),
                   sbt=np.zeros((q, T)), stt=np.zeros(T))
        for _ in celulas
    ]

    def passada(centrada: bool):
        for fatia in _chunks(len(ds)):
            lr, alvo = _targets(ds.hr(fatia), d, p, center_model)
            pad = _pad_lr(lr)

            def uma(k):
                I, J = celulas[k]
                s = stats[k]
                b = _cell_basis(pad, I, J, tabela)
                t = _cell_targets(alvo, I, J, d)
                if not centrada:
                    s.sb += b.sum(axis=0)
                    s.st += t.sum(axis=0)
                    return
                b -= s.sb
                t = t - s.st
                s.sbb += b.T @ b
                s.sbt += b.T @ t
                s.stt += (t * t).sum(axis=0)

            with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
                list(pool.map(uma, range(len(celulas))))

    passada(centrada=False)
    for s in stats:
        s.sb /= s.n
        s.st /= s.n
    passada(centrada=True)
    return stats


def _pool(stats: list[_CellStats]) -> _CellStats:
    """Junta estatísticas centradas de várias células (correção de médias)."""
    n = sum(s.n for s in stats)
    mb = sum(s.n * s.sb for s in stats) / n
    mt = sum(s.n * s.st for s in stats) / n
    out = _CellStats(n=n, sb=mb, st=mt, sbb=np.zeros_like(stats[0].sbb),
                     sbt=np.zeros_like(stats[0].sbt), stt=np.zeros_like(stats[0].stt))
    for s in stats:
        db, dt = s.sb - mb, s.st - mt
        out.sbb += s.sbb + s.n * np.outer(db, db)
        out.sbt += s.sbt + s.n * np.outer(db, dt)
        out.stt += s.stt + s.n * dt * dt
    return out


def _solve(s: _CellStats, ridge: float) -> np.ndarray:
    """Equações normais padronizadas com ridge·traço/q na diagonal → coef [q, T]."""
    q = len(s.sb)
    std = np.sqrt(np.diag(s.sbb) / s.n)
    std[~(std > 0)] = 1.0
    G = s.sbb / (s.n * np.outer(std, std))
    R = s.sbt / (s.n * std[:, None])
    tr = float(np.trace(G))
    G[np.diag_indices(q)] += ridge * (tr / q if tr > 0 else 1.0)
    try:
        fator = linalg.cho_factor(G, check_finite=True)
    except (linalg.LinAlgError, ValueError) as e:
        raise MomentFitError(f"singular system: {e}") from e
    beta = linalg.cho_solve(fator, R)
    if not np.all(np.isfinite(beta)):
        raise MomentFitError("singular system: solução não finita")
    return beta / std[:, None]


def fit_stochastic(
    ds: Dataset,
    p: int,
    spec: BasisSpec,
    ridge: float = DEFAULT_RIDGE,
    center_model=None,
    tie_offsets: bool = False,
    threads: int = 1,
) -> MomentModel:
    """Ajusta o momento de ordem p por pixel HR e canal (princípio da ortogonalidade).

    Todas as Δ² posições HR de uma célula LR compartilham o mesmo estêncil,
    então uma única matriz q×q por célula serve aos 2Δ² alvos. Com
    tie_offsets, células a ≥ 2 da borda dividem os mesmos coeficientes por
    posição dentro do bloco (dado estacionário).
    """
    _check_order(p, center_model)
    if ridge < 0:
        raise ValueError(f"ridge deve ser >= 0, recebido {ridge}")
    d = ds.delta
    H, W = ds.shape
    h, w = H // d, W // d
    tabela = spec.table
    q = len(tabela)
    logging.info(f"fit_stochastic: p={p}, modelo {spec.label} (q={q}), {len(ds)} amostras, {h}×{w} células")

    stats = _accumulate(ds, p, center_model, tabela, threads)

    resolvidos: dict[int, tuple[_CellStats, np.ndarray]] = {}
    interiores = [k for k in range(h * w) if 2 <= k // w < h - 2 and 2 <= k % w < w - 2]
    if tie_offsets:
        if interiores:
            pool = _pool([stats[k] for k in interiores])
            coef_pool = _solve(pool, ridge)
            for k in interiores:
                resolvidos[k] = (pool, coef_pool)
        else:
            logging.warning(f"tie_offsets: grade LR {h}×{w} sem células interiores; ajuste por célula")

    intercept = np.empty((H, W, 2))
    coef = np.empty((H, W, 2, q))
    term_mean = np.empty((H, W, q))
    for k, s in enumerate(stats):
        ref, c = resolvidos[k] if k in resolvidos else (s, _solve(s, ridge))
        I, J = divmod(k, w)
        ys, xs = slice(I * d, (I + 1) * d), slice(J * d, (J + 1) * d)
        coef[ys, xs] = c.T.reshape(2, d, d, q).transpose(1, 2, 0, 3)
        intercept[ys, xs] = ref.st.reshape(2, d, d).transpose(1, 2, 0)
        term_mean[ys, xs] = ref.sb

    modelo = MomentModel(
        spec=spec, p=p, delta=d, intercept=intercept, coef=coef,
        term_mean=term_mean, centered=(p == 2),
    )
    modelo.train_mse = model_mse(modelo, ds, center_model)
    logging.info(f"fit_stochastic: modelo {spec.label} → MSE de treino {modelo.train_mse:.6g}")
    return modelo


def model_mse(model, ds: Dataset, center_model=None) -> float:
    """MSE do estimador (qualquer objeto com predict) contra os alvos de ds."""
    p = getattr(model, "p", 1)
    _check_order(p, center_model)
    total, count = 0.0, 0
    for fatia in _chunks(len(ds)):
        lr, alvo = _targets(ds.hr(fatia), ds.delta, p, center_model)
        total += float(np.sum((model.predict(lr) - alvo) ** 2))
        count += alvo.size
    return total / count


# ── Combinação de estimadores ────────────────────────────────────────────────

def estimate_moment_fields(mean_model, var_model, lr: np.ndarray) -> MomentField:
    """Média de um estimador p=1 e variância (≥ ε_var) de um p=2."""
    mean = mean_model.predict(lr)
    variance = np.maximum(var_model.predict(lr), EPS_VAR)
    return MomentField(mean=mean, variance=variance)


def eval_moments(mm_p1: MomentModel, mm_p2: MomentModel, lr: np.ndarray) -> MomentField:
    if mm_p1.p != 1 or mm_p2.p != 2:
        raise ValueError(f"esperado (p=1, p=2), recebido (p={mm_p1.p}, p={mm_p2.p})")
    if mm_p1.shape != mm_p2.shape or mm_p1.delta != mm_p2.delta:
        raise FieldShapeError(
            f"modelos incompatíveis: {mm_p1.shape}/Δ={mm_p1.delta} e {mm_p2.shape}/Δ={mm_p2.delta}"
        )
    return estimate_moment_fields(mm_p1, mm_p2, lr)


# ── Varredura de modelos ─────────────────────────────────────────────────────

def _select(valores: list[float], tolerancia: float) -> int:
    validos = [v for v in valores if np.isfinite(v)]
    if not validos:
        raise MomentFitError("nenhum modelo com MSE de validação finita")
    limite = min(validos) * (1.0 + tolerancia)
    return next(i for i, v in enumerate(valores) if np.isfinite(v) and v <= limite)


@dataclass
class ModelSweepReport:
    p: int
    rows: list[dict]
    selected: int
    models: dict = field(default_factory=dict, repr=False)

    def __len__(self) -> int:
        return len(self.rows)

    def to_frame(self) -> pd.DataFrame:
        df = pd.DataFrame(self.rows)
        df["selected"] = df["model_id"] == self.selected
        return df


def sweep_models(
    ds_train: Dataset,
    ds_valid: Dataset,
    p: int,
    model_ids,
    ridge: float = DEFAULT_RIDGE,
    center_model=None,
    linear_only: bool = False,
    threads: int = 1,
) -> ModelSweepReport:
    """MSE de treino/validação ao longo da escada de modelos.

    Seleciona o menor modelo a 0,5% da melhor MSE de validação. Para p=2 sem
    center_model, todos os modelos são centrados pelo p=1 do modelo mais rico,
    então os alvos são os mesmos em toda a varredura.
    """
    ids = sorted({int(m) for m in model_ids}, key=lambda m: TERM_COUNTS[m])
    if not ids:
        raise ValueError("lista de modelos vazia")
    specs = [BasisSpec(m, linear_only) for m in ids]
    if p == 2 and center_model is None:
        center_model = fit_stochastic(ds_train, 1, BasisSpec(ids[-1]), ridge, threads=threads)

    modelos = {}
    rows = []
    for spec in specs:
        mm = fit_stochastic(ds_train, p, spec, ridge, center_model, threads=threads)
        modelos[spec.model_id] = mm
        rows.append({
            "model_id": spec.model_id,
            "label": spec.label,
            "q": spec.q,
            "train_mse": mm.train_mse,
            "valid_mse": model_mse(mm, ds_valid, center_model),
        })

    base = rows[0]["valid_mse"]
    rico = modelos[ids[-1]]
    ref = [rico.predict(ds_valid.lr(f)) for f in _chunks(len(ds_valid))]
    for row in rows:
        row["rel_mse"] = row["valid_mse"] / base if base > 0 else float("nan")
        mm = modelos[row["model_id"]]
        erro = sum(
            float(np.abs(mm.predict(ds_valid.lr(f)) - r).sum())
            for f, r in zip(_chunks(len(ds_valid)), ref)
        )
        row["mae_vs_richest"] = erro / (len(ds_valid) * 2 * ds_valid.shape[0] * ds_valid.shape[1])
        logging.info(
            f"sweep_models: modelo {row['label']} q={row['q']} "
            f"treino={row['train_mse']:.6g} validação={row['valid_mse']:.6g}"
        )

    escolhido = ids[_select([r["valid_mse"] for r in rows], SWEEP_TOLERANCE)]
    return ModelSweepReport(p=p, rows=rows, selected=escolhido, models=modelos)


# ── Oráculo gaussiano ─────────────────────────────────────────────────────────

@lru_cache(maxsize=8)
def _oracle_operators(params: SpectrumParams, delta: int, H: int, W: int):
    """K = CGᵀ(GCGᵀ)⁺ [N, M] e a variância condicional HR [H, W]."""
    N = H * W
    c = params.covariance_kernel(H, W)
    ys, xs = np.divmod(np.arange(N), W)
    C = c[(ys[:, None] - ys[None, :]) % H, (xs[:, None] - xs[None, :]) % W]

    h, w = H // delta, W // delta
    bloco = (ys // delta) * w + (xs // delta)
    G = np.zeros((h * w, N))
    G[bloco, np.arange(N)] = 1.0 / (delta * delta)

    CGt = C @ G.T
    S = G @ CGt
    vals, vecs = linalg.eigh(S)
    topo = float(np.max(np.abs(vals)))
    if not topo > 0:
        raise OracleError("ill-conditioned: GCGᵀ nulo")
    nulos = vals <= 1e-10 * topo
    # Modos de amplitude zero (k=0 na lei de potência) são as únicas direções nulas aceitas.
    permitidos = int(np.count_nonzero(params.amplitude(H, W) == 0))
    if np.count_nonzero(nulos) > permitidos:
        raise OracleError(
            f"ill-conditioned: GCGᵀ com {np.count_nonzero(nulos)} direções nulas "
            f"(esperado ≤ {permitidos})"
        )
    V = vecs[:, ~nulos]
    S_pinv = (V / vals[~nulos]) @ V.T
    K = CGt @ S_pinv
    var = np.maximum(np.diag(C) - np.sum(K * CGt, axis=1), EPS_VAR).reshape(H, W)
    K.setflags(write=False)
    var.setflags(write=False)
    return K, var


def gaussian_oracle(spectrum_params: SpectrumParams, delta: int, lr: np.ndarray) -> MomentField:
    """Momentos condicionais exatos do SF para dado gaussiano (warp=0)."""
    lr, unico = _as_batch(lr)
    n, c, h, w = lr.shape
    if c != 2:
        raise FieldShapeError(f"LR esperado com 2 canais, recebido {lr.shape}")
    H, W = h * delta, w * delta
    if H * W > ORACLE_MAX_PIXELS:
        raise OracleError(f"grade {H}×{W} grande demais para o oráculo denso (máx {ORACLE_MAX_PIXELS} pixels)")
    K, var = _oracle_operators(spectrum_params, int(delta), H, W)
    media_hr = (lr.reshape(n, 2, h * w) @ K.T).reshape(n, 2, H, W)
    mean = media_hr - upsample_nearest(lr, delta)
    variance = np.broadcast_to(var, (n, 2, H, W)).copy()
    if unico:
        return MomentField(mean=mean[0], variance=variance[0])
    return MomentField(mean=mean, variance=variance)


# ── Estimador por rede ────────────────────────────────────────────────────────

@dataclass(frozen=True)
class NetTrainConfig:
    epochs: int = 20
    batch_size: int = 64
    seed: int = 0
    adam: AdamHyper = AdamHyper()
    valid_fraction: float = 0.1


def moment_network_layers(blocks: int, filters: int, delta: int) -> list:
    """LR [n, 2, h, w] → momento [n, 2, hΔ, wΔ]; convolucional com skips."""
    layers = [conv3x3(2, filters), relu()]
    layers += [residual_block(filters) for _ in range(blocks)]
    layers += [conv3x3(filters, 2 * delta * delta), d2s(delta)]
    return layers


@dataclass
class MomentNetwork:
    params: NetworkParams
    delta: int
    p: int
    arch: tuple[int, int]
    history: list[dict] = field(default_factory=list)

    def predict(self, lr: np.ndarray) -> np.ndarray:
        lr, unico = _as_batch(lr)
        partes = [net_forward(self.params, lr[f])[0] for f in _chunks(len(lr), 256)]
        saida = np.concatenate(partes)
        return saida[0] if unico else saida

    def history_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.history, columns=["epoch", "train_mse", "valid_mse"])

    def save(self, path) -> None:
        save_network(self.params, path)

    @classmethod
    def load(cls, path, p: int) -> "MomentNetwork":
        params = load_network(path)
        if not params.layers or params.layers[-1].kind != "depth_to_space":
            raise DatasetFormatError(f"{path}: checkpoint não é uma rede de momentos")
        delta = int(params.layers[-1].args[0])
        blocks = sum(1 for l in params.layers if l.kind == "residual_block")
        filters = int(params.layers[0].args[1])
        return cls(params=params, delta=delta, p=p, arch=(blocks, filters))


def _net_mse(params, x, y) -> float:
    total = 0.0
    for f in _chunks(len(x), 256):
        total += float(np.sum((net_forward(params, x[f])[0] - y[f]) ** 2))
    return total / y.size


def _materialize(ds: Dataset, p: int, center_model):
    xs, ys = [], []
    for f in _chunks(len(ds)):
        lr, alvo = _targets(ds.hr(f), ds.delta, p, center_model)
        xs.append(lr)
        ys.append(alvo)
    return np.concatenate(xs), np.concatenate(ys)


def fit_moment_network(
    ds: Dataset,
    p: int,
    arch: tuple[int, int] = NETWORK_LADDER[0],
    train_cfg: NetTrainConfig = NetTrainConfig(),
    center_model=None,
    ds_valid: Dataset | None = None,
) -> MomentNetwork:
    """Regressão MSE LR → alvo do momento p; histórico de MSE por época.

    A camada de saída começa com pesos nulos e bias igual à média do alvo por
    canal, então a rede parte do estimador constante.
    """
    _check_order(p, center_model)
    if ds_valid is None:
        ds, ds_valid = split_dataset(ds, 1.0 - train_cfg.valid_fraction, seed=train_cfg.seed)
    blocks, filters = arch
    d = ds.delta
    x_tr, y_tr = _materialize(ds, p, center_model)
    x_va, y_va = _materialize(ds_valid, p, center_model)

    params = build_network(moment_network_layers(blocks, filters, d), seed=train_cfg.seed)
    cabeca = params.weights[-2]
    cabeca["w"][...] = 0.0
    cabeca["b"][...] = np.repeat(y_tr.mean(axis=(0, 2, 3)), d * d)

    rng = np.random.default_rng(train_cfg.seed)
    estado = None
    historico = []
    n = len(x_tr)
    bs = max(1, min(train_cfg.batch_size, n))
    logging.info(f"fit_moment_network: p={p}, arq {arch}, {params.n_params()} parâmetros, {n} amostras")
    for epoca in range(1, train_cfg.epochs + 1):
        perm = rng.permutation(n)
        soma = 0.0
        for k, ini in enumerate(range(0, n, bs)):
            lote = perm[ini:ini + bs]
            try:
                with np.errstate(over="ignore", invalid="ignore"):
                    out, tape = net_forward(params, x_tr[lote], record=True)
                    diff = out - y_tr[lote]
                    perda = float(np.mean(diff**2))
                    if not math.isfinite(perda):
                        raise NonFiniteError(f"perda {perda}")
                    grads = net_backward(params, tape, 2.0 * diff / diff.size)
                    params, estado = adam_step(params, grads, estado, train_cfg.adam)
            except NonFiniteError as e:
                raise TrainingDivergedError(
                    f"treino divergiu na época {epoca}, lote {k}: {e}"
                ) from e
            soma += perda * len(lote)
        with np.errstate(over="ignore", invalid="ignore"):
            try:
                valid = _net_mse(params, x_va, y_va)
            except NonFiniteError as e:
                raise TrainingDivergedError(f"validação não finita na época {epoca}: {e}") from e
        historico.append({"epoch": epoca, "train_mse": soma / n, "valid_mse": valid})
        logging.info(f"fit_moment_network: época {epoca} treino={soma / n:.6g} validação={valid:.6g}")

    return MomentNetwork(params=params, delta=d, p=p, arch=(blocks, filters), history=historico)


@dataclass
class NetworkSweepReport:
    p: int
    rows: list[dict]
    selected: tuple[int, int]
    networks: dict = field(default_factory=dict, repr=False)

    def to_frame(self) -> pd.DataFrame:
        df = pd.DataFrame(self.rows)
        df["selected"] = [(b, f) == self.selected for b, f in zip(df["blocks"], df["filters"])]
        return df


def sweep_networks(
    ds_train: Dataset,
    ds_valid: Dataset,
    p: int,
    ladder=NETWORK_LADDER,
    train_cfg: NetTrainConfig = NetTrainConfig(),
    center_model=None,
) -> NetworkSweepReport:
    """Escada de arquiteturas; seleciona a menor a 2% da melhor MSE de validação."""
    ladder = [tuple(a) for a in ladder]
    if not ladder:
        raise ValueError("escada de arquiteturas vazia")
    redes, rows = {}, []
    for arch in ladder:
        net = fit_moment_network(ds_train, p, arch, train_cfg, center_model, ds_valid)
        redes[arch] = net
        rows.append({
            "blocks": arch[0],
            "filters": arch[1],
            "n_params": net.params.n_params(),
            "train_mse": net.history[-1]["train_mse"] if net.history else float("nan"),
            "valid_mse": net.history[-1]["valid_mse"] if net.history else float("nan"),
        })
    escolhido = ladder[_select([r["valid_mse"] for r in rows], NETWORK_TOLERANCE)]
    return NetworkSweepReport(p=p, rows=rows, selected=escolhido, networks=redes)


# ── I/O CGM1 ──────────────────────────────────────────────────────────────────

def write_moment_model(mm: MomentModel, path) -> None:
    H, W = mm.shape
    with open(path, "wb") as fh:
        fh.write(MODEL_MAGIC)
        fh.write(np.array([MODEL_VERSION, H, W, mm.delta], dtype="<u4").tobytes())
        fh.write(np.array(
            [mm.spec.model_id, mm.p, mm.spec.q, int(mm.centered), int(mm.spec.linear_only)],
            dtype="<u4",
        ).tobytes())
        for arr in (mm.intercept, mm.coef, mm.term_mean):
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def read_moment_model(path) -> MomentModel:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != MODEL_MAGIC:
        raise DatasetFormatError(f"bad magic: {raw[:4]!r} em {path} (esperado {MODEL_MAGIC!r})")
    cab = 4 + 9 * 4
    if len(raw) < cab:
        raise DatasetFormatError(f"truncated payload: cabeçalho incompleto em {path}")
    version, H, W, delta, model_id, p, q, centered, linear = (
        int(x) for x in np.frombuffer(raw, dtype="<u4", count=9, offset=4)
    )
    if version != MODEL_VERSION:
        raise DatasetFormatError(f"versão CGM1 não suportada: {version}")
    if H * W * (2 + 2 * q + q) > 2**32:
        raise DatasetFormatError(f"dimension overflow: {H}×{W}, q={q}")
    try:
        spec = BasisSpec(model_id, bool(linear))
    except ValueError as e:
        raise DatasetFormatError(f"cabeçalho inválido: {e}") from e
    if spec.q != q or p not in (1, 2) or delta < 1:
        raise DatasetFormatError(f"cabeçalho inválido: modelo {model_id}, q={q}, p={p}, delta={delta}")
    tamanhos = (H * W * 2, H * W * 2 * q, H * W * q)
    esperado = 8 * sum(tamanhos)
    if len(raw) - cab < esperado:
        raise DatasetFormatError(f"truncated payload: esperado {esperado} bytes, arquivo tem {len(raw) - cab}")
    if len(raw) - cab > esperado:
        raise DatasetFormatError(f"{len(raw) - cab - esperado} bytes sobrando depois do payload")
    dados = np.frombuffer(raw, dtype="<f8", offset=cab).astype(np.float64)
    a, b = tamanhos[0], tamanhos[0] + tamanhos[1]
    return MomentModel(
        spec=spec, p=p, delta=delta,
        intercept=dados[:a].reshape(H, W, 2),
        coef=dados[a:b].reshape(H, W, 2, q),
        term_mean=dados[b:].reshape(H, W, q),
        centered=bool(centered),
    )
