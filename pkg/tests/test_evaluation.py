import json

import numpy as np
import pandas as pd
import pytest

from errors import MetricUndefinedError
from evaluation import (
    REPORT_KEYS,
    build_report,
    consistency_metric,
    diversity_metric,
    emit_figures,
    emit_report,
    energy_spectrum,
    load_report,
    longitudinal_gradient,
    stats_report,
)
from filters import upsample_nearest
from moments import MomentField


def _par(sigma):
    """Duas amostras ±sigma: σ̂ (1/r) igual a sigma em todo pixel."""
    return np.stack([-sigma, sigma])


def _campo_momentos(var):
    return MomentField(mean=np.zeros_like(var), variance=var)


def _sem_media_em_blocos(ruido, delta):
    n, c, H, W = ruido.shape
    medias = ruido.reshape(n, c, H // delta, delta, W // delta, delta).mean(axis=(3, 5))
    return ruido - upsample_nearest(medias, delta)


@pytest.fixture
def relatorio(rng):
    lrs = rng.standard_normal((3, 2, 4, 4))
    ensembles = [upsample_nearest(lr, 2)[None] + 0.3 * rng.standard_normal((4, 2, 8, 8)) for lr in lrs]
    mfs = [_campo_momentos(np.full((2, 8, 8), 0.09)) for _ in lrs]
    return build_report(ensembles, lrs, mfs, delta=2, bins=20)


class TestDiversityMetric:
    def test_exact_match(self, rng):
        sigma = rng.uniform(0.5, 2.0, (2, 4, 4))
        pct, err = diversity_metric([_par(sigma)], [_campo_momentos(sigma**2)])
        assert pct == pytest.approx(0.0, abs=1e-12)
        assert err == 0.0

    def test_mode_collapse(self, rng):
        sigma = rng.uniform(0.5, 2.0, (2, 4, 4))
        pct, _ = diversity_metric([np.zeros((3, 2, 4, 4))], [_campo_momentos(sigma**2)])
        assert pct == pytest.approx(100.0)

    def test_double_spread(self, rng):
        sigma = rng.uniform(0.5, 2.0, (2, 4, 4))
        pct, _ = diversity_metric([_par(2 * sigma)], [_campo_momentos(sigma**2)])
        assert pct == pytest.approx(100.0)

    def test_scale_invariant(self, rng):
        x = rng.standard_normal((5, 2, 4, 4))
        var = rng.uniform(0.5, 2.0, (2, 4, 4))
        a = diversity_metric([x], [_campo_momentos(var)])[0]
        b = diversity_metric([3.0 * x], [_campo_momentos(9.0 * var)])[0]
        assert b == pytest.approx(a, rel=1e-12)

    def test_stderr_over_lr_fields(self):
        sigma = np.ones((2, 4, 4))
        pct, err = diversity_metric(
            [_par(sigma), np.zeros((2, 2, 4, 4))], [_campo_momentos(sigma), _campo_momentos(sigma)]
        )
        assert pct == pytest.approx(50.0)
        assert err == pytest.approx(50.0)

    def test_zero_reference(self):
        with pytest.raises(MetricUndefinedError):
            diversity_metric([_par(np.ones((2, 4, 4)))], [_campo_momentos(np.zeros((2, 4, 4)))])

    def test_single_member_ensemble(self):
        with pytest.raises(ValueError, match="2 membros"):
            diversity_metric([np.zeros((1, 2, 4, 4))], [_campo_momentos(np.ones((2, 4, 4)))])

    def test_length_mismatch(self):
        with pytest.raises(ValueError, match="ensembles para"):
            diversity_metric([_par(np.ones((2, 4, 4)))], [])


class TestConsistencyMetric:
    def test_zero_block_mean_noise(self, rng):
        lrs = rng.standard_normal((3, 2, 4, 4))
        ensembles = [
            upsample_nearest(lr, 4)[None] + _sem_media_em_blocos(rng.standard_normal((5, 2, 16, 16)), 4)
            for lr in lrs
        ]
        pct, _ = consistency_metric(ensembles, lrs, 4)
        assert pct == pytest.approx(0.0, abs=1e-10)

    def test_scaled_lr(self, rng):
        lrs = rng.standard_normal((2, 2, 4, 4))
        ensembles = [upsample_nearest(1.1 * lr, 2)[None] for lr in lrs]
        pct, err = consistency_metric(ensembles, lrs, 2)
        assert pct == pytest.approx(10.0, rel=1e-10)
        assert err == pytest.approx(0.0, abs=1e-9)

    def test_zero_lr(self):
        with pytest.raises(MetricUndefinedError):
            consistency_metric([np.zeros((2, 2, 4, 4))], [np.zeros((2, 2, 2))], 2)


class TestEnergySpectrum:
    def test_single_mode(self):
        H = W = 32
        a, k0 = 1.5, 5
        x = np.arange(W)
        campo = np.zeros((2, H, W))
        campo[0] = a * np.cos(2 * np.pi * k0 * x / W)[None, :]
        k, E = energy_spectrum(campo)
        assert k[0] == 1.0
        assert E[k0 - 1] == pytest.approx(a**2 / 2, rel=1e-12)
        np.testing.assert_allclose(np.delete(E, k0 - 1), 0.0, atol=1e-20)

    def test_parseval(self, rng):
        campos = rng.standard_normal((4, 2, 16, 16))
        _, E = energy_spectrum(campos)
        variancia = campos.var(axis=(2, 3)).sum(axis=1).mean()
        assert E.sum() == pytest.approx(variancia, rel=1e-12)


class TestStatsReport:
    def test_constant_field(self):
        with pytest.raises(MetricUndefinedError, match="ζ"):
            stats_report(np.ones((2, 2, 8, 8)), 2)

    def test_histograms_are_densities(self, rng):
        st = stats_report(rng.standard_normal((6, 2, 16, 16)), 4, bins=30)
        for centros, pdf in ((st.zeta_bins, st.zeta_pdf), (st.sf_bins, st.sf_pdf)):
            largura = centros[1] - centros[0]
            assert len(pdf) == 30
            assert float(np.sum(pdf) * largura) == pytest.approx(1.0, abs=1e-9)

    def test_zeta_has_unit_second_moment(self, rng):
        campos = rng.standard_normal((3, 2, 8, 8))
        g = longitudinal_gradient(campos)
        zeta = g / np.sqrt(np.mean(g**2))
        assert float(np.mean(zeta**2)) == pytest.approx(1.0)

    def test_dissipation_is_k_squared_energy(self, rng):
        st = stats_report(rng.standard_normal((2, 2, 16, 16)), 4)
        np.testing.assert_allclose(st.dissipation_E, st.spectrum_k**2 * st.spectrum_E)


class TestReport:
    def test_round_trip(self, relatorio, tmp_path):
        caminhos = emit_report(relatorio, tmp_path / "r.json")
        assert len(caminhos) == 4
        back = load_report(tmp_path / "r.json")
        assert back.diversity_pct == relatorio.diversity_pct
        np.testing.assert_array_equal(back.spectrum_E, relatorio.spectrum_E)

    def test_json_floats_are_lossless(self, relatorio, tmp_path):
        relatorio.diversity_pct = 0.1 + 0.2
        relatorio.consistency_pct = float(np.nextafter(7.5, 8.0))
        emit_report(relatorio, tmp_path / "r.json")
        back = load_report(tmp_path / "r.json")
        assert back.diversity_pct == 0.1 + 0.2
        assert back.consistency_pct == float(np.nextafter(7.5, 8.0))

    def test_schema(self, relatorio, tmp_path):
        emit_report(relatorio, tmp_path / "r.json")
        dados = json.loads((tmp_path / "r.json").read_text(encoding="utf-8"))
        assert list(dados) == list(REPORT_KEYS)
        assert len(dados["spectrum_k"]) == len(dados["spectrum_E"]) == len(dados["dissipation_E"])
        assert len(dados["zeta_bins"]) == len(dados["zeta_pdf"]) == 20
        assert dados["diversity_pct"] >= 0 and dados["consistency_stderr"] >= 0

    def test_companion_csvs(self, relatorio, tmp_path):
        emit_report(relatorio, tmp_path / "r.json")
        espectro = pd.read_csv(tmp_path / "r_spectrum.csv")
        assert list(espectro.columns) == ["k", "E", "dissipation"]
        np.testing.assert_array_equal(espectro["E"].to_numpy(), relatorio.spectrum_E)
        assert len(pd.read_csv(tmp_path / "r_sf.csv")) == 20

    def test_empty_ensemble(self):
        with pytest.raises(ValueError, match="vazio"):
            build_report([], [], [], delta=2)

    def test_invalid_report_writes_nothing(self, relatorio, tmp_path):
        relatorio.consistency_pct = float("nan")
        with pytest.raises(ValueError, match="consistency_pct"):
            emit_report(relatorio, tmp_path / "r.json")
        assert list(tmp_path.iterdir()) == []

    def test_missing_key(self, tmp_path):
        (tmp_path / "r.json").write_text(json.dumps({"diversity_pct": 1.0}), encoding="utf-8")
        with pytest.raises(ValueError, match="sem as chaves"):
            load_report(tmp_path / "r.json")

    def test_figures(self, relatorio, tmp_path):
        emit_figures({"gan": relatorio, "upsample": relatorio}, tmp_path / "f.html")
        html = (tmp_path / "f.html").read_text(encoding="utf-8")
        assert "Espectro de energia" in html
        assert "upsample" in html

    def test_figures_need_reports(self, tmp_path):
        with pytest.raises(ValueError):
            emit_figures({}, tmp_path / "f.html")
