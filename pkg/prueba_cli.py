# prueba_cli.py
import json

import numpy as np
import pytest

from harness.bop_io import read_bop_results
from main import main


@pytest.fixture(scope="module")
def synth_dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth")
    assert main(["synth", "gen", "--count", "2", "--no-noise", "--init-level", "5", "--seed", "3",
                 "--out", str(out)]) == 0
    return out


def test_error_con_codigo_en_stderr(tmp_path, capsys):
    code = main(["eval", "--dataset", str(tmp_path), "--results", str(tmp_path / "nada.csv")])
    assert code == 1
    err = capsys.readouterr().err
    assert "error code=MissingFile" in err


def test_synth_gen_exporta_bop(synth_dataset):
    assert (synth_dataset / "models" / "models_info.json").exists()
    assert (synth_dataset / "test" / "000000" / "depth" / "000001.png").exists()
    gt = read_bop_results(synth_dataset / "results_gt.csv")
    init = read_bop_results(synth_dataset / "results_init.csv")
    assert [r.obj_id for r in gt] == [1, 2]
    for a, b in zip(gt, init):
        assert np.linalg.norm(a.pose.t - b.pose.t) == pytest.approx(5.0, abs=1e-5)


def test_eval_de_la_gt_da_ar_uno(synth_dataset, tmp_path):
    out = tmp_path / "ar.json"
    code = main(["eval", "--dataset", str(synth_dataset), "--results", str(synth_dataset / "results_gt.csv"),
                 "--out-json", str(out)])
    assert code == 0
    report = json.loads(out.read_text())
    assert report["AR"] == pytest.approx(1.0)
    assert report["num_samples"] == 2


def test_eval_imprime_el_resumen(synth_dataset, capsys):
    assert main(["eval", "--dataset", str(synth_dataset), "--results",
                 str(synth_dataset / "results_gt.csv")]) == 0
    assert "AR" in json.loads(capsys.readouterr().out)


def test_refine_sobre_el_dataset(synth_dataset, tmp_path):
    cfg = tmp_path / "refine.env"
    cfg.write_text("ITERATIONS=1\n")
    out = tmp_path / "pose.json"
    code = main(["refine", "--dataset", str(synth_dataset), "--obj-id", "1", "--im-id", "0",
                 "--config", str(cfg), "--out", str(out)])
    assert code == 0
    result = json.loads(out.read_text())
    assert len(result["R"]) == 9 and len(result["t_mm"]) == 3
    assert result["iterations"] == 1


def test_refine_sin_obj_id(synth_dataset, capsys):
    assert main(["refine", "--dataset", str(synth_dataset)]) == 1
    assert "error code=ConfigError" in capsys.readouterr().err


def test_refine_batch(synth_dataset, tmp_path):
    cfg = tmp_path / "refine.env"
    cfg.write_text("ITERATIONS=1\n")
    out = tmp_path / "refined.csv"
    code = main(["refine-batch", "--dataset", str(synth_dataset), "--results",
                 str(synth_dataset / "results_init.csv"), "--out", str(out), "--config", str(cfg)])
    assert code == 0
    assert len(read_bop_results(out)) == 2


def test_bench_con_suite_desconocida(capsys):
    assert main(["bench", "--suite", "cualquiera"]) == 1
    assert "error code=ConfigError" in capsys.readouterr().err


def test_argumento_no_numerico_sale_con_uno(capsys):
    assert main(["bench", "--suite", "noise-sweep", "--seeds", "muchas"]) == 1
    assert "error code=ConfigError" in capsys.readouterr().err


def test_semilla_negativa_se_valida(capsys):
    assert main(["bench", "--suite", "noise-sweep", "--seed", "-3"]) == 1
    err = capsys.readouterr().err
    assert "error code=ConfigError" in err and "seed" in err


def test_oclusion_fuera_de_rango_se_valida(tmp_path, capsys):
    code = main(["synth", "gen", "--count", "1", "--occlusion", "1.5", "--out", str(tmp_path)])
    assert code == 1
    assert "error code=ConfigError" in capsys.readouterr().err
    assert not (tmp_path / "results_gt.csv").exists()


def test_configuracion_invalida(tmp_path, capsys):
    cfg = tmp_path / "bad.env"
    cfg.write_text("PATCH=4\n")
    assert main(["bench", "--suite", "noise-sweep", "--config", str(cfg)]) == 1
    assert "error code=ConfigError" in capsys.readouterr().err
