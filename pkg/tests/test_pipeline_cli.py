import csv
import json

import numpy as np
import pytest

from advseg.adversary import DiscriminatorConfig
from advseg.cli import main
from advseg.errors import ConfigError, ShapeMismatchError
from advseg.params import save_model
from advseg.pipeline import experiment_table, predict, predict_volume
from advseg.segnet import GeneratorConfig, init_generator
from advseg.trainer import TrainConfig, train
from advseg.volume_store import LabelVolume, Volume, load_labels, save_labels, save_volume


def _cfg(k):
    return (GeneratorConfig(k=k, depth=2, base_channels=4, input_size=(32, 32)),
            DiscriminatorConfig(k=k, levels=2, base_channels=4, input_size=(32, 32)),
            TrainConfig(k=k, seed=1, batch_size=4, total_iterations=120, checkpoint_interval=0,
                        learning_rate=0.003))


@pytest.fixture(scope="module")
def trained(small_dataset, tmp_path_factory):
    out = {}
    for k in (0, 1):
        d = tmp_path_factory.mktemp(f"run_k{k}")
        train(small_dataset, *_cfg(k), out_dir=d)
        out[k] = d
    return out


def test_trained_prediction_overlaps_reference(trained, small_dataset, tmp_path):
    pred = predict(trained[1], small_dataset / "case_004.json", 1, tmp_path / "p")
    ref = load_labels(small_dataset / "case_004_labels.json")
    assert pred.shape == ref.shape
    assert (pred.mask & ref.mask).any()
    assert load_labels(tmp_path / "p") == pred


def test_zero_head_predicts_empty_mask():
    G = init_generator(GeneratorConfig(k=1, depth=1, base_channels=2, input_size=(8, 8)), 0)
    G.params["head.w"][...] = 0
    G.params["head.b"][...] = 0
    vol = Volume(np.random.default_rng(0).random((3, 8, 8)))
    out = predict_volume(G, vol)
    assert out.shape == (3, 8, 8) and out.count() == 0


@pytest.mark.parametrize("depth", [1, 2, 5])
def test_output_depth_matches_input(depth):
    G = init_generator(GeneratorConfig(k=2, depth=1, base_channels=2, input_size=(8, 8)), 0)
    assert predict_volume(G, Volume(np.random.default_rng(depth).random((depth, 8, 8)))).depth == depth


def test_k_mismatch_and_bad_size(trained, tmp_path):
    save_volume(Volume(np.zeros((2, 32, 32)) + np.arange(32)), tmp_path / "v")
    with pytest.raises(ConfigError, match="k"):
        predict(trained[1], tmp_path / "v", 0, tmp_path / "p")
    save_volume(Volume(np.random.default_rng(0).random((2, 30, 30))), tmp_path / "odd")
    with pytest.raises(ShapeMismatchError, match="pad"):
        predict(trained[1], tmp_path / "odd", None, tmp_path / "p")


def test_experiment_table(trained, small_dataset):
    table = experiment_table(small_dataset, {1: trained[1]}, ["none", "3d"], speckles=4, speckle_radius=1)
    rows = list(csv.reader(table.splitlines()))
    assert rows[0] == ["k", "none", "3d"] and len(rows) == 2
    assert float(rows[1][2]) > float(rows[1][1])
    again = experiment_table(small_dataset, {1: trained[1]}, ["none", "3d"], speckles=4, speckle_radius=1)
    assert again == table
    single = experiment_table(small_dataset, {0: trained[0]}, ["2d"])
    assert len(single.splitlines()) == 2
    with pytest.raises(ConfigError):
        experiment_table(small_dataset, {0: trained[1]}, ["none"])


# -- command line ---------------------------------------------------------------

def test_cli_phantom(tmp_path):
    assert main(["--seed", "5", "phantom", "--out", str(tmp_path / "d"), "--count", "3", "--dims", "16x16x6"]) == 0
    manifest = json.loads((tmp_path / "d" / "manifest.json").read_text())
    assert manifest["seed"] == 5 and len(manifest["train"]) + len(manifest["validation"]) == 3
    meta = json.loads((tmp_path / "d" / "case_000.json").read_text())
    assert (meta["width"], meta["height"], meta["depth"]) == (16, 16, 6)


def test_cli_train_predict_evaluate_experiment(small_dataset, tmp_path, capsys):
    cfg = {"total_iterations": 4, "batch_size": 2, "checkpoint_interval": 2, "k": 0,
           "generator": {"depth": 2, "base_channels": 2, "input_size": [32, 32]},
           "discriminator": {"levels": 2, "base_channels": 2}}
    (tmp_path / "train.json").write_text(json.dumps(cfg))
    run = tmp_path / "run"
    assert main(["--config", str(tmp_path / "train.json"), "--seed", "2", "train",
                 "--data", str(small_dataset), "--out", str(run)]) == 0
    assert (run / "stats.csv").read_text().splitlines()[0] == "iter,l_cls,l_gan_d,l_gan_g,l_total,ms"
    state = json.loads((run / "checkpoints" / "iter_000004" / "state.json").read_text())
    assert state["iteration"] == 4 and state["train_config"]["seed"] == 2

    preds = tmp_path / "preds"
    assert main(["predict", "--checkpoint", str(run), "--volume", str(small_dataset / "case_004.json"),
                 "--k", "0", "--out", str(preds / "case_004.json")]) == 0
    assert main(["predict", "--checkpoint", str(run), "--volume", str(small_dataset / "case_004.json"),
                 "--k", "1", "--out", str(preds / "x.json")]) == 1
    assert capsys.readouterr().err.startswith("error: config: ")

    # evaluate a perfect prediction and the network's
    save_labels(load_labels(small_dataset / "case_004_labels.json"), tmp_path / "perfect" / "case_004")
    assert main(["evaluate", "--pred", str(tmp_path / "perfect"), "--ref", str(small_dataset),
                 "--out", str(tmp_path / "perfect.csv")]) == 0
    rows = list(csv.reader(open(tmp_path / "perfect.csv")))
    assert rows[0] == ["case", "voe", "ravd", "assd", "rmssd", "mssd", "score_voe", "score_ravd",
                       "score_assd", "score_rmssd", "score_mssd", "mean_score"]
    assert rows[1][0] == "case_004" and float(rows[1][-1]) == 100.0

    out = tmp_path / "table.csv"
    assert main(["experiment", "--data", str(small_dataset), "--checkpoint", f"0={run}",
                 "--modes", "none,2d,3d", "--out", str(out)]) == 0
    assert out.read_text().splitlines()[0] == "k,none,2d,3d"


def test_cli_despeckle(tmp_path):
    m = np.zeros((3, 6, 6), dtype=np.uint8)
    m[:, :3, :3] = 1
    m[1, 5, 5] = 1
    save_labels(LabelVolume(m), tmp_path / "in")
    assert main(["despeckle", "--in", str(tmp_path / "in.json"), "--out", str(tmp_path / "out.json"),
                 "--mode", "3d"]) == 0
    assert load_labels(tmp_path / "out").count() == 27
    assert main(["despeckle", "--in", str(tmp_path / "in.json"), "--out", str(tmp_path / "o2"),
                 "--mode", "2d", "--connectivity", "4"]) == 0
    assert load_labels(tmp_path / "o2").count() == 27


def test_cli_errors(tmp_path, capsys):
    assert main(["despeckle", "--in", str(tmp_path / "missing.json"), "--out", str(tmp_path / "o"),
                 "--mode", "3d"]) == 1
    assert capsys.readouterr().err.startswith("error: format: ")
    (tmp_path / "bad.json").write_text(json.dumps({"learning_rte": 1}))
    assert main(["--config", str(tmp_path / "bad.json"), "train", "--data", str(tmp_path),
                 "--out", str(tmp_path / "r")]) == 1
    assert "config" in capsys.readouterr().err
    with pytest.raises(SystemExit):
        main(["phantom"])
