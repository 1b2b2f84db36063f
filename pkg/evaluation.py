"""
evaluation.py — Métricas de diversidade/consistência e estatísticas de turbulência.

Convenções (as mesmas para todos os modelos comparados):
  - σ amostral com normalização 1/r, igual à perda de diversidade;
  - espectro de energia E(k): anéis inteiros k = round(|k|), |F|²/N² somado
    nos dois canais, bins k ≥ 1 — Σ E(k) é a variância espacial (Parseval);
  - dissipação k²·E(k) com viscosidade unitária;
  - ζ = (∂U¹/∂x)/⟨(∂U¹/∂x)²⟩^½, diferença central periódica.

Saída: JSON com esquema fixo + CSVs (pandas) + figuras HTML (plotly).
Floats: CSVs com %.17g; o JSON usa a forma mais curta que volta ao mesmo
float64 (repr do json), igualmente sem perda.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import asdict, dataclass

import numpy as np
import pandas as pd
import plotly.graph_objects as go

from errors import FieldShapeError, MetricUndefinedError
from filters import box_filter_coarsen
from grid import sf_decompose
from moments import EPS_VAR

DEFAULT_BINS = 50
REPORT_KEYS = (
    "diversity_pct", "diversity_stderr", "consistency_pct", "consistency_stderr",
    "spectrum_k", "spectrum_E", "dissipation_E", "zeta_bins", "zeta_pdf", "sf_bins", "sf_pdf",
)

_PLOTLY_LAYOUT = dict(
    paper_bgcolor="rgba(0,0,0,0)",
    plot_bgcolor="rgba(0,0,0,0)",
    font=dict(family="DM Sans, Outfit, sans-serif", size=11),
    margin=dict(l=10, r=10, t=40, b=10),
)


# ── Métricas ──────────────────────────────────────────────────────────────────

def _ensemble(amostras) -> np.ndarray:
    x = np.asarray(amostras, dtype=np.float64)
    if x.ndim != 4 or x.shape[1] != 2:
        raise FieldShapeError(f"ensemble esperado [r, 2, H, W], recebido {x.shape}")
    if len(x) < 2:
        raise ValueError(f"ensemble precisa de pelo menos 2 membros, recebido {len(x)}")
    return x


def _mean_stderr(valores: list[float]) -> tuple[float, float]:
    v = np.asarray(valores, dtype=np.float64) * 100.0
    if v.size == 0:
        raise ValueError("nenhum campo LR para avaliar")
    erro = float(v.std(ddof=1) / np.sqrt(v.size)) if v.size > 1 else 0.0
    return float(v.mean()), erro


def diversity_metric(ensembles, mf_per_lr) -> tuple[float, float]:
    """(%, erro padrão) de E‖σ − σ̂‖₂/‖σ‖₂ sobre os campos LR."""
    if len(ensembles) != len(mf_per_lr):
        raise ValueError(f"{len(ensembles)} ensembles para {len(mf_per_lr)} campos de momento")
    razoes = []
    for i, (amostras, mf) in enumerate(zip(ensembles, mf_per_lr)):
        x = _ensemble(amostras)
        var_ref = np.asarray(mf.variance, dtype=np.float64)
        if var_ref.shape != x.shape[1:]:
            raise FieldShapeError(f"campo de momentos {var_ref.shape} para amostras {x.shape[1:]}")
        if np.all(var_ref <= EPS_VAR):
            raise MetricUndefinedError(f"σ de referência nulo no campo LR {i}")
        sigma = np.sqrt(var_ref)
        sigma_hat = x.std(axis=0)
        razoes.append(np.linalg.norm(sigma - sigma_hat) / np.linalg.norm(sigma))
    return _mean_stderr(razoes)


def consistency_metric(ensembles, lrs, delta: int) -> tuple[float, float]:
    """(%, erro padrão) de E[(1/‖ξ̄‖)·E‖g(ξ̂) − ξ̄‖₂] sobre os campos LR."""
    if len(ensembles) != len(lrs):
        raise ValueError(f"{len(ensembles)} ensembles para {len(lrs)} campos LR")
    razoes = []
    for i, (amostras, lr) in enumerate(zip(ensembles, lrs)):
        x = np.asarray(amostras, dtype=np.float64)
        if x.ndim != 4 or len(x) < 1:
            raise FieldShapeError(f"ensemble {i} vazio ou mal formado: {x.shape}")
        lr = np.asarray(lr, dtype=np.float64)
        norma = np.linalg.norm(lr)
        if norma == 0:
            raise MetricUndefinedError(f"‖ξ̄‖ = 0 no campo LR {i}")
        erro = box_filter_coarsen(x, delta) - lr[None]
        razoes.append(float(np.mean(np.sqrt(np.sum(erro**2, axis=(1, 2, 3))))) / norma)
    return _mean_stderr(razoes)


# ── Estatísticas ──────────────────────────────────────────────────────────────

def energy_spectrum(fields) -> tuple[np.ndarray, np.ndarray]:
    """(k, E(k)) médio sobre os campos [n, 2, H, W] (ou [2, H, W])."""
    f = np.asarray(fields, dtype=np.float64)
    if f.ndim == 3:
        f = f[None]
    if f.ndim != 4:
        raise FieldShapeError(f"campos esperados [n, 2, H, W], recebido {f.shape}")
    _, _, H, W = f.shape
    potencia = np.abs(np.fft.fft2(f)) ** 2 / float(H * W) ** 2
    potencia = potencia.sum(axis=1).mean(axis=0)
    ky = np.fft.fftfreq(H) * H
    kx = np.fft.fftfreq(W) * W
    anel = np.rint(np.hypot(ky[:, None], kx[None, :])).astype(np.intp)
    E = np.bincount(anel.ravel(), weights=potencia.ravel())
    k = np.arange(len(E))
    return k[1:].astype(np.float64), E[1:]


def longitudinal_gradient(fields) -> np.ndarray:
    """∂U¹/∂x por diferença central periódica (x = última dimensão)."""
    f = np.asarray(fields, dtype=np.float64)
    u = f[..., 0, :, :]
    return 0.5 * (np.roll(u, -1, axis=-1) - np.roll(u, 1, axis=-1))


def _pdf(valores: np.ndarray, bins: int) -> tuple[np.ndarray, np.ndarray]:
    densidade, bordas = np.histogram(valores.ravel(), bins=bins, density=True)
    return 0.5 * (bordas[:-1] + bordas[1:]), densidade


@dataclass
class FieldStats:
    spectrum_k: np.ndarray
    spectrum_E: np.ndarray
    dissipation_E: np.ndarray
    zeta_bins: np.ndarray
    zeta_pdf: np.ndarray
    sf_bins: np.ndarray
    sf_pdf: np.ndarray


def stats_report(fields, delta: int, bins: int = DEFAULT_BINS) -> FieldStats:
    f = np.asarray(fields, dtype=np.float64)
    if f.ndim == 3:
        f = f[None]
    if f.ndim != 4 or len(f) < 1 or f.shape[1] != 2:
        raise FieldShapeError(f"stats_report precisa de campos [n, 2, H, W], recebido {f.shape}")
    k, E = energy_spectrum(f)
    grad = longitudinal_gradient(f)
    escala = float(np.mean(grad**2))
    if escala == 0:
        raise MetricUndefinedError("⟨(∂U/∂x)²⟩ = 0: campo constante em x, ζ indefinido")
    zb, zp = _pdf(grad / np.sqrt(escala), bins)
    sf = sf_decompose(f, delta)[1][:, 0]
    sb, sp = _pdf(sf, bins)
    return FieldStats(k, E, k**2 * E, zb, zp, sb, sp)


# ── Relatório ─────────────────────────────────────────────────────────────────

@dataclass
class MetricsReport:
    diversity_pct: float
    diversity_stderr: float
    consistency_pct: float
    consistency_stderr: float
    spectrum_k: np.ndarray
    spectrum_E: np.ndarray
    dissipation_E: np.ndarray
    zeta_bins: np.ndarray
    zeta_pdf: np.ndarray
    sf_bins: np.ndarray
    sf_pdf: np.ndarray

    def to_dict(self) -> dict:
        out = {}
        for chave, v in asdict(self).items():
            out[chave] = [float(x) for x in np.asarray(v).ravel()] if isinstance(v, np.ndarray) else float(v)
        return out


def build_report(ensembles, lrs, mf_per_lr, delta: int, bins: int = DEFAULT_BINS) -> MetricsReport:
    """Métricas + estatísticas de todos os campos gerados juntos."""
    if len(ensembles) == 0 or any(len(e) == 0 for e in ensembles):
        raise ValueError("ensemble vazio: nada para avaliar")
    div, div_err = diversity_metric(ensembles, mf_per_lr)
    con, con_err = consistency_metric(ensembles, lrs, delta)
    st = stats_report(np.concatenate([np.asarray(e, dtype=np.float64) for e in ensembles]), delta, bins)
    logging.info(f"build_report: diversidade {div:.3f}±{div_err:.3f}%, consistência {con:.3f}±{con_err:.3f}%")
    return MetricsReport(div, div_err, con, con_err, **asdict(st))


def _check_report(report: MetricsReport) -> None:
    for chave in ("diversity_pct", "diversity_stderr", "consistency_pct", "consistency_stderr"):
        v = getattr(report, chave)
        if not (np.isfinite(v) and v >= 0):
            raise ValueError(f"{chave} inválido: {v}")
    pares = (("spectrum_k", "spectrum_E"), ("spectrum_k", "dissipation_E"),
             ("zeta_bins", "zeta_pdf"), ("sf_bins", "sf_pdf"))
    for a, b in pares:
        xa, xb = np.asarray(getattr(report, a)), np.asarray(getattr(report, b))
        if xa.size == 0 or xa.shape != xb.shape:
            raise ValueError(f"{a}/{b} vazios ou de comprimentos diferentes: {xa.shape}/{xb.shape}")


def _stem(path) -> str:
    raiz, ext = os.path.splitext(os.fspath(path))
    return raiz if ext.lower() == ".json" else os.fspath(path)


def emit_report(report: MetricsReport, path) -> list[str]:
    """Grava o JSON e os CSVs companheiros; valida tudo antes de escrever."""
    _check_report(report)
    dados = report.to_dict()
    stem = _stem(path)
    tabelas = {
        f"{stem}_spectrum.csv": pd.DataFrame({
            "k": dados["spectrum_k"], "E": dados["spectrum_E"], "dissipation": dados["dissipation_E"],
        }),
        f"{stem}_zeta.csv": pd.DataFrame({"bin": dados["zeta_bins"], "pdf": dados["zeta_pdf"]}),
        f"{stem}_sf.csv": pd.DataFrame({"bin": dados["sf_bins"], "pdf": dados["sf_pdf"]}),
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump({k: dados[k] for k in REPORT_KEYS}, fh, indent=2)
    for destino, df in tabelas.items():
        df.to_csv(destino, index=False, float_format="%.17g")
    return [os.fspath(path), *tabelas]


def load_report(path) -> MetricsReport:
    with open(path, encoding="utf-8") as fh:
        dados = json.load(fh)
    faltando = [k for k in REPORT_KEYS if k not in dados]
    if faltando:
        raise ValueError(f"relatório sem as chaves: {', '.join(faltando)}")
    return MetricsReport(**{
        k: np.asarray(v, dtype=np.float64) if isinstance(v, list) else float(v)
        for k, v in dados.items() if k in REPORT_KEYS
    })


def emit_figures(reports: dict[str, MetricsReport], path) -> None:
    """HTML com espectro, dissipação e PDFs; uma curva por modelo."""
    if not reports:
        raise ValueError("nenhum relatório para plotar")
    paineis = [
        ("Espectro de energia", "spectrum_k", "spectrum_E", "log", "k", "E(k)"),
        ("Espectro de dissipação", "spectrum_k", "dissipation_E", "log", "k", "k²E(k)"),
        ("PDF de ζ", "zeta_bins", "zeta_pdf", "log", "ζ", "PDF"),
        ("PDF de U¹ subfiltro", "sf_bins", "sf_pdf", "linear", "U¹_SF", "PDF"),
    ]
    partes = []
    for i, (titulo, cx, cy, escala, rx, ry) in enumerate(paineis):
        fig = go.Figure()
        for nome, rep in reports.items():
            fig.add_trace(go.Scatter(
                x=getattr(rep, cx), y=getattr(rep, cy), mode="lines", name=nome,
                hovertemplate=f"<b>{nome}</b><br>{rx}=%{{x:.3g}}<br>{ry}=%{{y:.3g}}<extra></extra>",
            ))
        fig.update_layout(
            **_PLOTLY_LAYOUT,
            title=dict(text=titulo, font=dict(size=14)),
            height=380,
            xaxis=dict(title=rx, type="log" if cx == "spectrum_k" else "linear"),
            yaxis=dict(title=ry, type=escala),
        )
        partes.append(fig.to_html(full_html=False, include_plotlyjs="cdn" if i == 0 else False))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("<html><head><meta charset='utf-8'></head><body>\n")
        fh.write("\n".join(partes))
        fh.write("\n</body></html>\n")
