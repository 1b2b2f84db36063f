import numpy as np
import pytest

from autonet import AdamHyper
from errors import (
    DatasetFormatError,
    FieldShapeError,
    MomentFitError,
    OracleError,
    TrainingDivergedError,
)
from grid import Dataset, SpectrumParams, split_dataset, synth_dataset
from moments import (
    EPS_VAR,
    STENCIL_LABELS,
    TERM_COUNTS,
    BasisSpec,
    MomentModel,
    MomentNetwork,
    NetTrainConfig,
    _select,
    basis_eval,
    build_stencil,
    eval_moments,
    fit_moment_network,
    fit_stochastic,
    gaussian_oracle,
    model_mse,
    read_moment_model,
    sweep_models,
    sweep_networks,
    write_moment_model,
)


def _rel_l2(a, b):
    return float(np.linalg.norm(a - b) / np.linalg.norm(b))


def _white_dataset(n, H, delta, s, seed):
    rng = np.random.default_rng(seed)
    return Dataset(samples=s * rng.standard_normal((n, 2, H, H)), delta=delta)


def _modelo_constante(valor_p1, valor_p2, H=4, delta=2):
    spec = BasisSpec(0)
    zeros = dict(coef=np.zeros((H, H, 2, spec.q)), term_mean=np.zeros((H, H, spec.q)))
    m1 = MomentModel(spec=spec, p=1, delta=delta, intercept=np.full((H, H, 2), valor_p1), **zeros)
    m2 = MomentModel(spec=spec, p=2, delta=delta, intercept=np.full((H, H, 2), valor_p2),
                     centered=True, **zeros)
    return m1, m2


class TestStencil:
    def test_labels(self):
        contagem = {r: int(np.sum(STENCIL_LABELS == r)) for r in ("N0", "N1", "C1", "N2", "C2")}
        assert contagem == {"N0": 1, "N1": 4, "C1": 4, "N2": 12, "C2": 4}

    def test_interior_window(self, rng):
        lr = rng.standard_normal((2, 8, 8))
        st = build_stencil(lr, (4 * 4 + 3, 5 * 4 + 1), 4)
        np.testing.assert_array_equal(st.values, lr[:, 2:7, 3:8].transpose(1, 2, 0))

    def test_center_is_the_cell_of_the_pixel(self, rng):
        lr = rng.standard_normal((2, 4, 4))
        st = build_stencil(lr, (5, 2), 2)
        np.testing.assert_array_equal(st.values[2, 2], lr[:, 2, 1])

    def test_corner_replicates_edge(self, rng):
        lr = rng.standard_normal((2, 4, 4))
        st = build_stencil(lr, (0, 0), 4)
        np.testing.assert_array_equal(st.values[0, 0], lr[:, 0, 0])
        np.testing.assert_array_equal(st.values[0, 4], lr[:, 0, 2])
        np.testing.assert_array_equal(st.values[4, 1], lr[:, 2, 0])

    def test_pixel_out_of_bounds(self):
        with pytest.raises(FieldShapeError, match="fora da grade"):
            build_stencil(np.zeros((2, 4, 4)), (16, 0), 4)


class TestBasis:
    @pytest.mark.parametrize("model_id", range(15))
    def test_term_counts(self, model_id):
        assert BasisSpec(model_id).q == TERM_COUNTS[model_id]

    def test_linear_only_counts(self):
        assert BasisSpec(6, linear_only=True).q == 18
        assert BasisSpec(14, linear_only=True).q == 50

    def test_ladder_is_nested(self, rng):
        st = build_stencil(rng.standard_normal((2, 6, 6)), (9, 10), 3)
        rico = basis_eval(BasisSpec(14), st)
        for m in range(14):
            np.testing.assert_array_equal(basis_eval(BasisSpec(m), st), rico[:TERM_COUNTS[m]])

    def test_model_zero_is_the_center_cell(self, rng):
        lr = rng.standard_normal((2, 4, 4))
        st = build_stencil(lr, (3, 3), 2)
        np.testing.assert_array_equal(basis_eval(BasisSpec(0), st), lr[:, 1, 1])

    def test_zero_stencil_gives_zero_terms(self):
        st = build_stencil(np.zeros((2, 3, 3)), (1, 1), 1)
        np.testing.assert_array_equal(basis_eval(BasisSpec(14), st), np.zeros(293))

    @pytest.mark.parametrize("model_id", [-1, 15, 2.5])
    def test_unknown_model(self, model_id):
        with pytest.raises(ValueError, match="unknown model_id"):
            BasisSpec(model_id)


class TestFitStochastic:
    def test_zero_dataset(self):
        ds = Dataset(samples=np.zeros((10, 2, 8, 8)), delta=2)
        mm = fit_stochastic(ds, 1, BasisSpec(3))
        np.testing.assert_array_equal(mm.intercept, 0.0)
        np.testing.assert_array_equal(mm.coef, 0.0)
        assert mm.train_mse == 0.0

    def test_singular_without_ridge(self):
        ds = Dataset(samples=np.zeros((10, 2, 8, 8)), delta=2)
        with pytest.raises(MomentFitError, match="singular system"):
            fit_stochastic(ds, 1, BasisSpec(3), ridge=0.0)

    def test_constant_second_moment(self, upsampled_dataset):
        class Centro:
            p = 1

            def predict(self, lr):
                return np.full((len(lr), 2, 8, 8), -0.5)

        mm = fit_stochastic(upsampled_dataset, 2, BasisSpec(3), center_model=Centro())
        np.testing.assert_allclose(mm.intercept, 0.25, rtol=1e-12)
        np.testing.assert_allclose(mm.coef, 0.0, atol=1e-10)
        assert mm.centered

    def test_second_moment_needs_center(self, tiny_dataset):
        with pytest.raises(ValueError, match="center_model"):
            fit_stochastic(tiny_dataset, 2, BasisSpec(0))

    def test_invalid_order(self, tiny_dataset):
        with pytest.raises(ValueError, match="ordem do momento"):
            fit_stochastic(tiny_dataset, 3, BasisSpec(0))

    def test_residual_is_orthogonal_to_basis(self, small_gaussian):
        ds = small_gaussian
        spec = BasisSpec(3)
        mm = fit_stochastic(ds, 1, spec, ridge=1e-12)
        r, c = 5, 6
        lr = ds.lr()
        residuo = ds.sf()[:, 0, r, c] - mm.predict(lr)[:, 0, r, c]
        termos = np.array([basis_eval(spec, build_stencil(x, (r, c), ds.delta)) for x in lr])
        termos -= termos.mean(axis=0)
        assert abs(residuo.mean()) <= 1e-10 * residuo.std()
        cov = termos.T @ residuo / len(residuo)
        np.testing.assert_allclose(cov, 0.0, atol=1e-8 * termos.std(axis=0).max() * residuo.std())

    def test_coefficients_converge_as_ridge_vanishes(self, small_gaussian):
        coefs = [fit_stochastic(small_gaussian, 1, BasisSpec(3), ridge=r).coef for r in (1e-2, 1e-5, 1e-10)]
        longe = np.abs(coefs[0] - coefs[2]).max()
        perto = np.abs(coefs[1] - coefs[2]).max()
        assert perto < longe / 10

    def test_thread_count_does_not_change_coefficients(self, small_gaussian):
        a = fit_stochastic(small_gaussian, 1, BasisSpec(5), threads=1)
        b = fit_stochastic(small_gaussian, 1, BasisSpec(5), threads=4)
        np.testing.assert_array_equal(a.coef, b.coef)
        np.testing.assert_array_equal(a.intercept, b.intercept)

    def test_train_mse_matches_model_mse(self, tiny_dataset):
        mm = fit_stochastic(tiny_dataset, 1, BasisSpec(3))
        assert mm.train_mse == pytest.approx(model_mse(mm, tiny_dataset), rel=1e-12)

    def test_tied_offsets_share_interior_coefficients(self):
        ds = synth_dataset(300, 32, 32, -5 / 3, 0.0, seed=6, delta=4)
        solto = fit_stochastic(ds, 1, BasisSpec(3))
        preso = fit_stochastic(ds, 1, BasisSpec(3), tie_offsets=True)
        np.testing.assert_array_equal(preso.coef[9, 10], preso.coef[21, 14])
        np.testing.assert_array_equal(preso.intercept[9, 10], preso.intercept[13, 18])
        assert not np.array_equal(preso.coef[1, 2], preso.coef[9, 10])
        assert preso.train_mse >= solto.train_mse * (1 - 1e-9)

    def test_predict_single_and_batch_agree(self, tiny_dataset):
        mm = fit_stochastic(tiny_dataset, 1, BasisSpec(5))
        lr = tiny_dataset.lr()
        np.testing.assert_allclose(mm.predict(lr[3]), mm.predict(lr)[3], rtol=1e-13, atol=1e-15)

    def test_predict_shape_mismatch(self, tiny_dataset):
        mm = fit_stochastic(tiny_dataset, 1, BasisSpec(0))
        with pytest.raises(FieldShapeError):
            mm.predict(np.zeros((2, 3, 4)))

    def test_white_noise_variance(self):
        s, delta = 1.5, 4
        ds = _white_dataset(3000, 8, delta, s, seed=2)
        m1 = fit_stochastic(ds, 1, BasisSpec(0))
        m2 = fit_stochastic(ds, 2, BasisSpec(0), center_model=m1)
        novos = _white_dataset(50, 8, delta, s, seed=3)
        mf = eval_moments(m1, m2, novos.lr())
        assert float(mf.variance.mean()) == pytest.approx(s**2 * (1 - 1 / delta**2), rel=0.05)
        assert abs(float(mf.mean.mean())) <= 0.05 * s


class TestSweepModels:
    def test_train_mse_does_not_increase_along_ladder(self):
        ds = synth_dataset(1200, 16, 16, -5 / 3, 0.5, seed=3, delta=4)
        treino, valid = split_dataset(ds, 0.9, seed=0)
        rel = sweep_models(treino, valid, 1, range(15))
        mses = [row["train_mse"] for row in rel.rows]
        assert [row["q"] for row in rel.rows] == list(TERM_COUNTS)
        for a, b in zip(mses, mses[1:]):
            assert b <= a * (1 + 1e-6)

    def test_single_model(self, tiny_dataset):
        treino, valid = split_dataset(tiny_dataset, 0.75, seed=1)
        rel = sweep_models(treino, valid, 1, [3])
        assert len(rel) == 1
        assert rel.selected == 3
        assert rel.rows[0]["rel_mse"] == 1.0
        assert rel.rows[0]["mae_vs_richest"] == 0.0

    def test_frame_flags_selection(self, tiny_dataset):
        treino, valid = split_dataset(tiny_dataset, 0.75, seed=1)
        df = sweep_models(treino, valid, 2, [0, 3]).to_frame()
        assert list(df["model_id"]) == [0, 3]
        assert df["selected"].sum() == 1
        assert {"train_mse", "valid_mse", "rel_mse", "mae_vs_richest"} <= set(df.columns)

    def test_selection_is_smallest_within_tolerance(self):
        assert _select([1.0, 0.996, 0.99], 0.005) == 2
        assert _select([1.0, 0.994, 0.99], 0.005) == 1
        assert _select([0.99, 0.994, 1.0], 0.005) == 0
        assert _select([float("nan"), 1.0], 0.005) == 1

    def test_empty_list(self, tiny_dataset):
        with pytest.raises(ValueError, match="vazia"):
            sweep_models(tiny_dataset, tiny_dataset, 1, [])


class TestGaussianOracle:
    def test_white_noise(self, rng):
        s2, delta = 2.0, 4
        mf = gaussian_oracle(SpectrumParams(kind="white", variance=s2), delta, rng.standard_normal((2, 4, 4)))
        np.testing.assert_allclose(mf.mean, 0.0, atol=1e-10)
        np.testing.assert_allclose(mf.variance, s2 * (1 - 1 / delta**2), rtol=1e-8)

    def test_unit_delta_has_no_subfilter(self, rng):
        lr = rng.standard_normal((2, 8, 8))
        lr -= lr.mean(axis=(1, 2), keepdims=True)
        mf = gaussian_oracle(SpectrumParams(), 1, lr)
        np.testing.assert_allclose(mf.mean, 0.0, atol=1e-8)
        assert mf.variance.max() <= 1e-8

    def test_variance_is_stationary_per_offset(self, rng):
        mf = gaussian_oracle(SpectrumParams(), 4, rng.standard_normal((2, 4, 4)))
        blocos = mf.variance[0].reshape(4, 4, 4, 4)
        for a in range(4):
            for b in range(4):
                np.testing.assert_allclose(blocos[:, a, :, b], blocos[0, a, 0, b], rtol=1e-8)

    def test_batch_and_linearity(self, rng):
        lr = rng.standard_normal((3, 2, 4, 4))
        params = SpectrumParams()
        lote = gaussian_oracle(params, 4, lr).mean
        np.testing.assert_allclose(lote[1], gaussian_oracle(params, 4, lr[1]).mean, rtol=1e-12, atol=1e-14)
        np.testing.assert_allclose(
            gaussian_oracle(params, 4, 2 * lr[0]).mean, 2 * lote[0], rtol=1e-10, atol=1e-12,
        )

    def test_matches_monte_carlo(self, small_gaussian):
        ds = small_gaussian
        mf = gaussian_oracle(SpectrumParams(), ds.delta, ds.lr())
        sf = ds.sf()
        residuo = float(np.mean((sf - mf.mean) ** 2))
        assert residuo == pytest.approx(float(mf.variance.mean()), rel=0.05)
        assert residuo < float(np.mean(sf**2))

    def test_grid_too_large(self):
        with pytest.raises(OracleError, match="grande demais"):
            gaussian_oracle(SpectrumParams(), 4, np.zeros((2, 9, 9)))

    def test_degenerate_covariance(self):
        with pytest.raises(OracleError, match="ill-conditioned"):
            gaussian_oracle(SpectrumParams(kind="white", variance=0.0), 2, np.zeros((2, 4, 4)))


class TestEvalMoments:
    def test_zero_coefficients(self, rng):
        m1, m2 = _modelo_constante(0.3, 0.7)
        mf = eval_moments(m1, m2, rng.standard_normal((2, 2, 2)))
        np.testing.assert_array_equal(mf.mean, 0.3)
        np.testing.assert_array_equal(mf.variance, 0.7)

    def test_variance_is_clamped(self, rng):
        m1, m2 = _modelo_constante(0.0, -1.0)
        mf = eval_moments(m1, m2, rng.standard_normal((5, 2, 2, 2)))
        assert mf.variance.shape == (5, 2, 4, 4)
        np.testing.assert_array_equal(mf.variance, EPS_VAR)

    def test_order_is_checked(self):
        m1, m2 = _modelo_constante(0.0, 1.0)
        with pytest.raises(ValueError, match="esperado"):
            eval_moments(m2, m1, np.zeros((2, 2, 2)))


class TestMomentModelIO:
    def test_round_trip(self, tiny_dataset, tmp_path):
        mm = fit_stochastic(tiny_dataset, 1, BasisSpec(5, linear_only=True))
        write_moment_model(mm, tmp_path / "m.cgm")
        back = read_moment_model(tmp_path / "m.cgm")
        assert back.spec == mm.spec
        assert (back.p, back.delta, back.centered) == (1, 2, False)
        lr = tiny_dataset.lr()
        np.testing.assert_array_equal(back.predict(lr), mm.predict(lr))

    def test_bad_magic(self, tmp_path):
        (tmp_path / "m.cgm").write_bytes(b"CGF1" + bytes(64))
        with pytest.raises(DatasetFormatError, match="bad magic"):
            read_moment_model(tmp_path / "m.cgm")

    def test_truncated(self, tiny_dataset, tmp_path):
        write_moment_model(fit_stochastic(tiny_dataset, 1, BasisSpec(0)), tmp_path / "m.cgm")
        raw = (tmp_path / "m.cgm").read_bytes()
        (tmp_path / "m.cgm").write_bytes(raw[:-8])
        with pytest.raises(DatasetFormatError, match="truncated payload"):
            read_moment_model(tmp_path / "m.cgm")

    def test_trailing_bytes(self, tiny_dataset, tmp_path):
        write_moment_model(fit_stochastic(tiny_dataset, 1, BasisSpec(0)), tmp_path / "m.cgm")
        with open(tmp_path / "m.cgm", "ab") as fh:
            fh.write(b"\0" * 8)
        with pytest.raises(DatasetFormatError, match="sobrando"):
            read_moment_model(tmp_path / "m.cgm")


class TestMomentNetwork:
    def test_constant_target_is_learned(self, upsampled_dataset):
        cfg = NetTrainConfig(epochs=2, batch_size=8)
        net = fit_moment_network(upsampled_dataset, 1, (1, 2), cfg, ds_valid=upsampled_dataset)
        assert len(net.history) == 2
        assert net.history[-1]["valid_mse"] <= 1e-3
        assert list(net.history_frame().columns) == ["epoch", "train_mse", "valid_mse"]

    def test_predict_shape(self, tiny_dataset):
        net = fit_moment_network(tiny_dataset, 1, (1, 2), NetTrainConfig(epochs=1))
        assert net.predict(tiny_dataset.lr()).shape == (24, 2, 8, 8)
        assert net.predict(tiny_dataset.lr(0)).shape == (2, 8, 8)

    def test_save_and_load(self, tiny_dataset, tmp_path):
        net = fit_moment_network(tiny_dataset, 1, (1, 3), NetTrainConfig(epochs=1))
        net.save(tmp_path / "n.cgn")
        back = MomentNetwork.load(tmp_path / "n.cgn", p=1)
        assert (back.delta, back.arch) == (2, (1, 3))
        lr = tiny_dataset.lr()
        np.testing.assert_array_equal(back.predict(lr), net.predict(lr))

    def test_divergence_is_reported(self, tiny_dataset):
        cfg = NetTrainConfig(epochs=3, adam=AdamHyper(lr=1e300))
        with pytest.raises(TrainingDivergedError, match="divergiu|não finita"):
            fit_moment_network(tiny_dataset, 1, (1, 2), cfg)

    def test_sweep(self, tiny_dataset):
        treino, valid = split_dataset(tiny_dataset, 0.75, seed=0)
        rel = sweep_networks(treino, valid, 1, ladder=((1, 2), (1, 3)), train_cfg=NetTrainConfig(epochs=1))
        assert rel.selected in {(1, 2), (1, 3)}
        df = rel.to_frame()
        assert len(df) == 2
        assert df["selected"].sum() == 1
        assert df["n_params"].iloc[0] < df["n_params"].iloc[1]


@pytest.mark.slow
class TestAcceptance:
    @pytest.fixture(scope="class")
    def gaussian_32(self):
        ds = synth_dataset(20050, 32, 32, -5 / 3, 0.0, seed=101, delta=4, threads=4)
        return ds.subset(range(20000)), ds.subset(range(20000, 20050))

    def test_mean_matches_oracle(self, gaussian_32):
        treino, valid = gaussian_32
        mm = fit_stochastic(treino, 1, BasisSpec(3), threads=4)
        oraculo = gaussian_oracle(SpectrumParams(), 4, valid.lr())
        assert _rel_l2(mm.predict(valid.lr()), oraculo.mean) <= 0.03

    def test_variance_matches_oracle(self, gaussian_32):
        treino, valid = gaussian_32
        m1 = fit_stochastic(treino, 1, BasisSpec(3), threads=4)
        m2 = fit_stochastic(treino, 2, BasisSpec(3), center_model=m1, threads=4)
        oraculo = gaussian_oracle(SpectrumParams(), 4, valid.lr())
        assert _rel_l2(eval_moments(m1, m2, valid.lr()).variance, oraculo.variance) <= 0.05

    def test_network_mean_matches_oracle(self, gaussian_32):
        treino, valid = gaussian_32
        net = fit_moment_network(treino.subset(range(5000)), 1, (2, 8), NetTrainConfig(epochs=10))
        oraculo = gaussian_oracle(SpectrumParams(), 4, valid.lr())
        assert _rel_l2(net.predict(valid.lr()), oraculo.mean) <= 0.05

    def test_quadratic_beats_linear_on_warped_data(self):
        ds = synth_dataset(6000, 16, 16, -5 / 3, 0.5, seed=202, delta=4, threads=4)
        treino, valid = split_dataset(ds, 5 / 6, seed=0)
        m1 = fit_stochastic(treino, 1, BasisSpec(6), threads=4)
        m1_lin = fit_stochastic(treino, 1, BasisSpec(6, linear_only=True), threads=4)
        # Campo com sinal simétrico: a média condicional é ímpar e os termos
        # quadráticos só mudam a validação dentro do ruído amostral.
        assert model_mse(m1, valid) <= model_mse(m1_lin, valid) * 1.01
        m2 = fit_stochastic(treino, 2, BasisSpec(6), center_model=m1, threads=4)
        m2_lin = fit_stochastic(treino, 2, BasisSpec(6, linear_only=True), center_model=m1, threads=4)
        assert model_mse(m2, valid, m1) < model_mse(m2_lin, valid, m1)
