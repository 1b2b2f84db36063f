"""
grid.py — Campos em grade, dataset, formato CGF1 e dados sintéticos.

Convenções:
  - campo HR: array [2, H, W] (U⁽¹⁾ leste, U⁽²⁾ norte), channel-major,
    row-major dentro do canal;
  - lote: [n, 2, H, W];
  - LR = box_filter_coarsen(HR, Δ) e SF = HR − upsample_nearest(LR, Δ).

Formato CGF1 (little-endian):
  b"CGF1" | u32 version=1 | u32 n_samples | u32 n_channels | u32 height |
  u32 width | u32 delta | float32[n_samples·n_channels·height·width]

n_channels = 2 para o dataset puro e 6 quando os campos de momento estão
anexados (média U1, U2 e variância U1, U2 depois dos dois canais de
velocidade). Metadados (seed, parâmetros do gerador, proveniência) vão num
arquivo lateral "<arquivo>.meta.json" — o CGF1 em si não tem onde guardá-los.
"""

from __future__ import annotations

import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from errors import DatasetFormatError, FieldShapeError, MissingMomentsError
from filters import box_filter_coarsen, upsample_nearest

MAGIC = b"CGF1"
VERSION = 1
N_CHANNELS = 2
_HEADER_BYTES = 4 + 6 * 4
# Uma amostra com mais de 2^32 valores não cabe em nada razoável.
_MAX_VALUES_PER_SAMPLE = 2**32

# Padrões de mesa: grade pequena o bastante para rodar em CPU.
DEFAULT_SIZE = 32
DEFAULT_DELTA = 4
DEFAULT_N_TRAIN = 20000
DEFAULT_N_VALID = 2000
DEFAULT_TRAIN_FRACTION = 0.9


# ── Tipos ─────────────────────────────────────────────────────────────────────

def check_field(arr: np.ndarray, nome: str = "campo") -> np.ndarray:
    """Valida um campo [2, H, W] ou lote [n, 2, H, W]: canais e finitude."""
    arr = np.asarray(arr)
    if arr.ndim not in (3, 4) or arr.shape[-3] != N_CHANNELS:
        raise FieldShapeError(
            f"{nome}: esperado [2, H, W] ou [n, 2, H, W], recebido {arr.shape}"
        )
    if not np.all(np.isfinite(arr)):
        raise FieldShapeError(f"{nome}: contém valores não finitos")
    return arr


@dataclass
class Dataset:
    """Coleção ordenada de snapshots HR, com momentos opcionalmente anexados.

    samples : float32 [n, 2, H, W]
    moments : float32 [n, 4, H, W] ou None — média (2 canais) + variância (2)
    """

    samples: np.ndarray
    delta: int
    meta: dict = field(default_factory=dict)
    moments: np.ndarray | None = None

    def __post_init__(self):
        self.samples = np.ascontiguousarray(self.samples, dtype=np.float32)
        check_field(self.samples, "samples")
        if self.samples.ndim != 4 or len(self.samples) < 1:
            raise FieldShapeError("dataset precisa de pelo menos uma amostra [n, 2, H, W]")
        H, W = self.samples.shape[-2:]
        if self.delta < 1 or H % self.delta or W % self.delta:
            raise FieldShapeError(f"dimensões {H}×{W} não divisíveis por delta={self.delta}")
        if self.moments is not None:
            self.moments = np.ascontiguousarray(self.moments, dtype=np.float32)
            if self.moments.shape != (len(self.samples), 4, H, W):
                raise FieldShapeError(
                    f"momentos com forma {self.moments.shape}, esperado "
                    f"{(len(self.samples), 4, H, W)}"
                )

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def shape(self) -> tuple[int, int]:
        return tuple(self.samples.shape[-2:])

    def hr(self, idx=slice(None)) -> np.ndarray:
        return self.samples[idx].astype(np.float64)

    def lr(self, idx=slice(None)) -> np.ndarray:
        return box_filter_coarsen(self.hr(idx), self.delta)

    def sf(self, idx=slice(None)) -> np.ndarray:
        return sf_decompose(self.hr(idx), self.delta)[1]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        mom = None if self.moments is None else self.moments[idx]
        return replace(self, samples=self.samples[idx], moments=mom, meta=dict(self.meta))

    def moment_fields(self, idx=slice(None)) -> tuple[np.ndarray, np.ndarray]:
        """(média, variância) float64 [n, 2, H, W] dos momentos anexados."""
        if self.moments is None:
            raise MissingMomentsError(
                "dataset sem campos de momento — rode fit-moments (ou oracle) antes"
            )
        mom = self.moments[idx].astype(np.float64)
        return mom[..., :2, :, :], mom[..., 2:, :, :]


def attach_moments(ds: Dataset, mean: np.ndarray, variance: np.ndarray) -> Dataset:
    """Novo Dataset com média/variância condicionais anexadas a cada amostra."""
    mean = np.asarray(mean, dtype=np.float64)
    variance = np.asarray(variance, dtype=np.float64)
    esperado = ds.samples.shape
    if mean.shape != esperado or variance.shape != esperado:
        raise FieldShapeError(
            f"momentos {mean.shape}/{variance.shape} não batem com o dataset {esperado}"
        )
    return replace(ds, moments=np.concatenate([mean, variance], axis=1), meta=dict(ds.meta))


# ── Espectro de síntese ───────────────────────────────────────────────────────

@dataclass(frozen=True)
class SpectrumParams:
    """Espectro do gerador gaussiano.

    kind="power_law": amplitude de Fourier ∝ k^((slope−1)/2), modo k=0 nulo,
    normalizada para variância unitária por canal. kind="white": ruído branco
    de variância `variance` (usado como oráculo de teste).
    """

    slope: float = -5.0 / 3.0
    kind: str = "power_law"
    variance: float = 1.0

    def amplitude(self, height: int, width: int) -> np.ndarray:
        if self.kind == "white":
            return np.full((height, width), np.sqrt(self.variance))
        if self.kind != "power_law":
            raise ValueError(f"espectro desconhecido: {self.kind!r}")
        ky = np.fft.fftfreq(height) * height
        kx = np.fft.fftfreq(width) * width
        k = np.hypot(ky[:, None], kx[None, :])
        amp = np.zeros_like(k)
        nz = k > 0
        amp[nz] = k[nz] ** ((self.slope - 1.0) / 2.0)
        # var(f) = média(A²) para ruído branco unitário filtrado por A.
        amp *= np.sqrt(self.variance / np.mean(amp**2))
        return amp

    def covariance_kernel(self, height: int, width: int) -> np.ndarray:
        """c(d) = cov(f(x), f(x+d)) do campo estacionário, [H, W]."""
        return np.fft.ifft2(self.amplitude(height, width) ** 2).real


def _is_pow2(n: int) -> bool:
    return n > 0 and (n & (n - 1)) == 0


def _synth_sample(amp: np.ndarray, warp: float, seed: int, index: int) -> np.ndarray:
    rng = np.random.default_rng([seed, index])
    ruido = rng.standard_normal((N_CHANNELS, *amp.shape))
    campo = np.fft.ifft2(np.fft.fft2(ruido) * amp).real
    if warp:
        campo = (1.0 - warp) * campo + warp * np.tanh(campo)
    return campo.astype(np.float32)


def synth_dataset(
    n: int,
    H: int,
    W: int,
    slope: float,
    warp: float,
    seed: int,
    delta: int = DEFAULT_DELTA,
    threads: int = 1,
) -> Dataset:
    """Gera n campos gaussianos periódicos com E(k) ∝ k^slope, opcionalmente
    deformados por x ↦ (1−warp)·x + warp·tanh(x).

    Cada amostra usa o próprio fluxo de RNG derivado de (seed, índice), então o
    resultado não depende do número de threads.
    """
    if n < 1:
        raise ValueError(f"n deve ser >= 1, recebido {n}")
    if not (_is_pow2(H) and _is_pow2(W)):
        raise FieldShapeError(f"H e W devem ser potências de dois, recebido {H}×{W}")
    if not slope < 0:
        raise ValueError(f"slope deve ser negativo, recebido {slope}")
    if not 0.0 <= warp <= 1.0:
        raise ValueError(f"warp deve estar em [0, 1], recebido {warp}")

    params = SpectrumParams(slope=float(slope))
    amp = params.amplitude(H, W)
    logging.info(f"synth_dataset: {n} amostras {H}×{W}, slope={slope}, warp={warp}")

    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        amostras = list(pool.map(lambda i: _synth_sample(amp, warp, seed, i), range(n)))

    meta = {
        "seed": int(seed),
        "generator": {"n": n, "H": H, "W": W, "slope": float(slope),
                      "warp": float(warp), "delta": delta, "kind": params.kind},
        "provenance": f"synth_dataset(n={n}, H={H}, W={W}, slope={slope}, "
                      f"warp={warp}, seed={seed})",
    }
    return Dataset(samples=np.stack(amostras), delta=delta, meta=meta)


# ── Decomposição LR + SF ──────────────────────────────────────────────────────

def sf_decompose(hr: np.ndarray, delta: int) -> tuple[np.ndarray, np.ndarray]:
    """HR → (LR, SF) com SF = HR − up(LR). Aceita campo ou lote."""
    hr = np.asarray(hr, dtype=np.float64)
    lr = box_filter_coarsen(hr, delta)
    return lr, hr - upsample_nearest(lr, delta)


# ── Divisão treino / validação ───────────────────────────────────────────────

def split_dataset(
    ds: Dataset, fraction: float = DEFAULT_TRAIN_FRACTION, seed: int = 0
) -> tuple[Dataset, Dataset]:
    """Embaralha por seed e corta em (treino, validação), disjuntos e exaustivos."""
    if not 0.0 < fraction < 1.0:
        raise ValueError(f"fração deve estar em (0, 1), recebido {fraction}")
    n = len(ds)
    if n < 2:
        raise ValueError("split precisa de pelo menos 2 amostras")
    perm = np.random.default_rng(seed).permutation(n)
    k = min(max(int(round(fraction * n)), 1), n - 1)
    treino, valid = ds.subset(perm[:k]), ds.subset(perm[k:])
    treino.meta["split"] = {"fraction": fraction, "seed": seed, "indices": perm[:k].tolist()}
    valid.meta["split"] = {"fraction": fraction, "seed": seed, "indices": perm[k:].tolist()}
    return treino, valid


# ── I/O CGF1 ──────────────────────────────────────────────────────────────────

def _meta_path(path) -> str:
    return os.fspath(path) + ".meta.json"


def write_dataset(ds: Dataset, path) -> None:
    """Grava o Dataset em CGF1 (bit-exato) + metadados em arquivo lateral."""
    payload = ds.samples if ds.moments is None else np.concatenate(
        [ds.samples, ds.moments], axis=1
    )
    n, c, h, w = payload.shape
    header = np.array([VERSION, n, c, h, w, ds.delta], dtype="<u4")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(header.tobytes())
        fh.write(np.ascontiguousarray(payload, dtype="<f4").tobytes())
    meta = {k: v for k, v in ds.meta.items() if k != "split"}
    if meta:
        with open(_meta_path(path), "w", encoding="utf-8") as fh:
            json.dump(meta, fh, indent=2, ensure_ascii=False)


def read_dataset(path) -> Dataset:
    """Lê um CGF1. Falha com "bad magic", "truncated payload" ou
    "dimension overflow" conforme o defeito do arquivo."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 4 or raw[:4] != MAGIC:
        raise DatasetFormatError(f"bad magic: {raw[:4]!r} em {path} (esperado {MAGIC!r})")
    if len(raw) < _HEADER_BYTES:
        raise DatasetFormatError(f"truncated payload: cabeçalho incompleto em {path}")
    version, n, c, h, w, delta = (int(x) for x in np.frombuffer(raw, dtype="<u4", count=6, offset=4))
    if version != VERSION:
        raise DatasetFormatError(f"versão CGF1 não suportada: {version}")
    if c * h * w > _MAX_VALUES_PER_SAMPLE:
        raise DatasetFormatError(f"dimension overflow: {c}×{h}×{w} valores por amostra")
    if n < 1 or c not in (2, 6) or h < 1 or w < 1 or delta < 1:
        raise DatasetFormatError(
            f"cabeçalho inválido: n={n}, canais={c}, {h}×{w}, delta={delta}"
        )
    esperado = n * c * h * w * 4
    disponivel = len(raw) - _HEADER_BYTES
    if disponivel < esperado:
        raise DatasetFormatError(
            f"truncated payload: cabeçalho declara {n} amostras ({esperado} bytes), "
            f"arquivo tem {disponivel}"
        )
    if disponivel > esperado:
        raise DatasetFormatError(f"{disponivel - esperado} bytes sobrando depois do payload")
    dados = np.frombuffer(raw, dtype="<f4", offset=_HEADER_BYTES).reshape(n, c, h, w)
    dados = dados.astype(np.float32)

    meta = {}
    if os.path.exists(_meta_path(path)):
        try:
            with open(_meta_path(path), encoding="utf-8") as fh:
                meta = json.load(fh)
        except (OSError, ValueError) as e:
            logging.warning(f"metadados ilegíveis em {_meta_path(path)}: {e}")
    return Dataset(
        samples=dados[:, :2],
        delta=delta,
        meta=meta,
        moments=dados[:, 2:] if c == 6 else None,
    )
