import argparse
import json
import os

import pandas as pd
import pytest

from cli import parse_model_list, read_config, run
from gan import load_checkpoint
from grid import read_dataset
from moments import read_moment_model


@pytest.fixture
def dados(tmp_path):
    caminho = tmp_path / "d.cgf"
    assert run(["gen-data", "--n", "20", "--size", "16", "--delta", "4", "--seed", "3",
                "--out", str(caminho)]) == 0
    return caminho


@pytest.fixture
def com_oraculo(tmp_path):
    entrada, saida = tmp_path / "p.cgf", tmp_path / "p_m.cgf"
    assert run(["gen-data", "--n", "12", "--size", "8", "--delta", "2", "--seed", "1",
                "--out", str(entrada)]) == 0
    assert run(["oracle", "--data", str(entrada), "--out", str(saida)]) == 0
    return saida


class TestHelpers:
    def test_model_ranges(self):
        assert parse_model_list("0..14") == list(range(15))
        assert parse_model_list("0,3,6") == [0, 3, 6]
        assert parse_model_list("0..2, 9") == [0, 1, 2, 9]

    @pytest.mark.parametrize("texto", ["15", "0..20", ""])
    def test_bad_model_list(self, texto):
        with pytest.raises(argparse.ArgumentTypeError):
            parse_model_list(texto)

    def test_read_config(self, tmp_path):
        (tmp_path / "c.cfg").write_text("# comentário\nbatch-size = 8  # fim\n\nridge=1e-6\n", encoding="utf-8")
        assert read_config(tmp_path / "c.cfg") == {"batch_size": "8", "ridge": "1e-6"}

    def test_read_config_quoted_values(self, tmp_path):
        (tmp_path / "c.cfg").write_text("out = 'saida #1.cgf'\nvariant=\"gensim\"\n", encoding="utf-8")
        assert read_config(tmp_path / "c.cfg") == {"out": "saida #1.cgf", "variant": "gensim"}

    def test_read_config_key_without_value(self, tmp_path):
        (tmp_path / "c.cfg").write_text("ridge=1e-6\nlinear-only\n", encoding="utf-8")
        with pytest.raises(ValueError, match="chave=valor"):
            read_config(tmp_path / "c.cfg")

    def test_read_config_without_equals(self, tmp_path):
        (tmp_path / "c.cfg").write_text("n 5\n", encoding="utf-8")
        with pytest.raises(ValueError, match="chave=valor"):
            read_config(tmp_path / "c.cfg")


class TestExitCodes:
    def test_help(self, capsys):
        assert run(["--help"]) == 0
        assert "gen-data" in capsys.readouterr().out

    def test_unknown_flag(self):
        assert run(["gen-data", "--out", "x.cgf", "--bogus"]) == 2

    def test_missing_subcommand(self):
        assert run([]) == 2

    def test_missing_file(self, tmp_path, capsys):
        assert run(["oracle", "--data", str(tmp_path / "nada.cgf"), "--out", str(tmp_path / "o.cgf")]) == 1
        assert "ERRO:" in capsys.readouterr().err

    def test_runtime_error_from_library(self, tmp_path, capsys):
        assert run(["gen-data", "--n", "2", "--size", "12", "--out", str(tmp_path / "d.cgf")]) == 1
        assert "potências de dois" in capsys.readouterr().err


class TestGenData:
    def test_readable(self, dados):
        ds = read_dataset(dados)
        assert len(ds) == 20
        assert ds.shape == (16, 16)
        assert ds.meta["seed"] == 3

    def test_byte_reproducible(self, tmp_path):
        for nome in ("a.cgf", "b.cgf"):
            assert run(["gen-data", "--n", "4", "--size", "8", "--delta", "2", "--seed", "9",
                        "--threads", "2", "--out", str(tmp_path / nome)]) == 0
        assert (tmp_path / "a.cgf").read_bytes() == (tmp_path / "b.cgf").read_bytes()

    def test_config_file_with_flag_winning(self, tmp_path):
        (tmp_path / "c.cfg").write_text("n = 5\nsize = 8\ndelta = 2\n", encoding="utf-8")
        saida = tmp_path / "d.cgf"
        assert run(["gen-data", "--config", str(tmp_path / "c.cfg"), "--n", "3", "--out", str(saida)]) == 0
        ds = read_dataset(saida)
        assert len(ds) == 3
        assert ds.shape == (8, 8)
        assert ds.delta == 2

    def test_config_supplies_required_options(self, tmp_path):
        saida = tmp_path / "d.cgf"
        (tmp_path / "c.cfg").write_text(f'n = 2\nsize = 8\ndelta = 2\nout = "{saida}"\n', encoding="utf-8")
        assert run(["gen-data", "--config", str(tmp_path / "c.cfg")]) == 0
        assert len(read_dataset(saida)) == 2

    def test_required_option_still_enforced(self, tmp_path):
        (tmp_path / "c.cfg").write_text("n = 2\n", encoding="utf-8")
        assert run(["gen-data", "--config", str(tmp_path / "c.cfg")]) == 2
        assert run(["gen-data", "--n", "2"]) == 2

    def test_config_unknown_key(self, tmp_path):
        (tmp_path / "c.cfg").write_text("steps = 5\n", encoding="utf-8")
        assert run(["gen-data", "--config", str(tmp_path / "c.cfg"), "--out", str(tmp_path / "d.cgf")]) == 2


class TestMoments:
    def test_fit_moments_writes_models_and_data(self, dados, tmp_path):
        prefixo = tmp_path / "se"
        saida = tmp_path / "d_m.cgf"
        assert run(["fit-moments", "--data", str(dados), "--model", "3", "--out-model", str(prefixo),
                    "--out-data", str(saida)]) == 0
        m1 = read_moment_model(f"{prefixo}.p1.cgm")
        m2 = read_moment_model(f"{prefixo}.p2.cgm")
        assert (m1.p, m2.p, m2.centered) == (1, 2, True)
        ds = read_dataset(saida)
        media, var = ds.moment_fields()
        assert media.shape == var.shape == (20, 2, 16, 16)
        assert var.min() > 0

    def test_fit_moments_network(self, com_oraculo, tmp_path):
        prefixo = tmp_path / "nn"
        assert run(["fit-moments", "--data", str(com_oraculo), "--estimator", "network", "--arch", "1,2",
                    "--epochs", "1", "--out-model", str(prefixo)]) == 0
        assert os.path.exists(f"{prefixo}.p1.cgn") and os.path.exists(f"{prefixo}.p2.cgn")

    def test_sweep_basis_all_models(self, tmp_path):
        dados = tmp_path / "s.cgf"
        assert run(["gen-data", "--n", "60", "--size", "16", "--delta", "4", "--warp", "0.5",
                    "--out", str(dados)]) == 0
        relatorio = tmp_path / "sweep.csv"
        assert run(["sweep-basis", "--data", str(dados), "--models", "0..14", "--out", str(relatorio)]) == 0
        df = pd.read_csv(relatorio)
        assert len(df) == 15
        assert df["selected"].sum() == 1

    def test_oracle_attaches_moments(self, com_oraculo):
        ds = read_dataset(com_oraculo)
        assert ds.moments is not None
        assert ds.meta["generator"]["slope"] == pytest.approx(-5 / 3)

    def test_oracle_without_slope(self, tmp_path):
        dados = tmp_path / "d.cgf"
        assert run(["gen-data", "--n", "2", "--size", "8", "--delta", "2", "--out", str(dados)]) == 0
        os.remove(f"{dados}.meta.json")
        assert run(["oracle", "--data", str(dados), "--out", str(tmp_path / "o.cgf")]) == 1
        assert run(["oracle", "--data", str(dados), "--slope", "-2", "--out", str(tmp_path / "o.cgf")]) == 0


class TestGanCommands:
    @pytest.fixture
    def checkpoint(self, com_oraculo, tmp_path):
        destino = tmp_path / "g.cgg"
        assert run(["train", "--data", str(com_oraculo), "--steps", "2", "--m", "2", "--r", "2",
                    "--noise", "2", "--blocks", "1", "--filters", "6", "--out", str(destino)]) == 0
        return destino

    def test_train_writes_checkpoint_and_log(self, checkpoint):
        assert load_checkpoint(checkpoint).delta == 2
        log = pd.read_csv(f"{checkpoint}.log.csv")
        assert list(log["step"]) == [1, 2]

    def test_train_needs_moments(self, dados, tmp_path, capsys):
        assert run(["train", "--data", str(dados), "--steps", "1", "--out", str(tmp_path / "g.cgg")]) == 1
        assert "momento" in capsys.readouterr().err

    def test_deconv_gan(self, checkpoint, com_oraculo, tmp_path):
        saida = tmp_path / "sr.cgf"
        assert run(["deconv", "--method", "gan", "--data", str(com_oraculo), "--checkpoint", str(checkpoint),
                    "--count", "3", "--out", str(saida)]) == 0
        assert len(read_dataset(saida)) == 3

    def test_evaluate_gan(self, checkpoint, com_oraculo, tmp_path):
        destino = tmp_path / "r.json"
        assert run(["evaluate", "--data", str(com_oraculo), "--method", "gan", "--checkpoint", str(checkpoint),
                    "--n-lr", "4", "--count", "3", "--bins", "10", "--out", str(destino),
                    "--figures", str(tmp_path / "f.html")]) == 0
        dados = json.loads(destino.read_text(encoding="utf-8"))
        assert dados["diversity_pct"] >= 0
        assert (tmp_path / "f.html").exists()


class TestDeconvAndEvaluate:
    @pytest.mark.parametrize("method,extra", [
        ("adm", ["--filter", "gaussian"]), ("adm", ["--filter", "box", "--terms", "2"]), ("taylor", []),
    ])
    def test_deconv_classic(self, dados, tmp_path, method, extra):
        saida = tmp_path / "x.cgf"
        assert run(["deconv", "--method", method, "--data", str(dados), "--index", "2", *extra,
                    "--out", str(saida)]) == 0
        ds = read_dataset(saida)
        assert len(ds) == 1 and ds.shape == (16, 16)
        assert ds.meta["method"] == method

    def test_deconv_index_out_of_range(self, dados, tmp_path):
        assert run(["deconv", "--method", "taylor", "--data", str(dados), "--index", "99",
                    "--out", str(tmp_path / "x.cgf")]) == 1

    def test_upsample_is_consistent_and_collapsed(self, dados, tmp_path):
        destino = tmp_path / "r.json"
        assert run(["evaluate", "--data", str(dados), "--method", "upsample", "--reference", "oracle",
                    "--n-lr", "5", "--count", "2", "--out", str(destino)]) == 0
        dados_json = json.loads(destino.read_text(encoding="utf-8"))
        assert dados_json["consistency_pct"] == 0.0
        assert dados_json["diversity_pct"] == pytest.approx(100.0)
        assert (tmp_path / "r_spectrum.csv").exists()

    def test_evaluate_needs_two_samples(self, dados, tmp_path):
        assert run(["evaluate", "--data", str(dados), "--method", "upsample", "--reference", "oracle",
                    "--count", "1", "--out", str(tmp_path / "r.json")]) == 1

    def test_attached_reference_requires_moments(self, dados, tmp_path, capsys):
        assert run(["evaluate", "--data", str(dados), "--method", "taylor",
                    "--out", str(tmp_path / "r.json")]) == 1
        assert "fit-moments" in capsys.readouterr().err


class TestByteReproducibility:
    def _duas_vezes(self, tmp_path, montar):
        saidas = []
        for rodada in ("a", "b"):
            pasta = tmp_path / rodada
            pasta.mkdir(parents=True)
            argv, arquivos = montar(pasta)
            assert run(argv) == 0
            saidas.append([(pasta / nome).read_bytes() for nome in arquivos])
        assert saidas[0] == saidas[1]

    def test_fit_moments(self, dados, tmp_path):
        def montar(pasta):
            return (["fit-moments", "--data", str(dados), "--model", "3", "--seed", "4", "--threads", "2",
                     "--out-model", str(pasta / "se"), "--out-data", str(pasta / "d_m.cgf")],
                    ["se.p1.cgm", "se.p2.cgm", "d_m.cgf"])

        self._duas_vezes(tmp_path, montar)

    def test_train_and_sample(self, com_oraculo, tmp_path):
        def montar(pasta):
            return (["train", "--data", str(com_oraculo), "--steps", "3", "--m", "2", "--r", "2",
                     "--noise", "2", "--blocks", "1", "--filters", "6", "--seed", "4", "--threads", "2",
                     "--out", str(pasta / "g.cgg")],
                    ["g.cgg", "g.cgg.log.csv"])

        self._duas_vezes(tmp_path, montar)
        checkpoint = tmp_path / "a" / "g.cgg"

        def amostrar(pasta):
            return (["deconv", "--method", "gan", "--data", str(com_oraculo), "--checkpoint", str(checkpoint),
                     "--count", "3", "--seed", "4", "--threads", "2", "--out", str(pasta / "sr.cgf")],
                    ["sr.cgf"])

        self._duas_vezes(tmp_path / "amostras", amostrar)
