import dataclasses
import json
import math
from pathlib import Path

import numpy as np
import pytest
import yaml

from memo_tta import bench, cli, data, nn
from memo_tta.config import ConfigError, RunConfig, dump_config, load_config, parse_config

from conftest import _perturb_bn

DEFAULTS = Path(__file__).resolve().parents[1] / "configs" / "default.yaml"

TINY = {
    "seed": 0,
    "data": {"num_classes": 3, "image_size": 16, "n_train_per_class": 6, "n_test_per_class": 2},
    "model": {"widths": [2, 4]},
    "train": {"epochs": 1, "batch_size": 8},
    "adapt": {"B": 2},
}


def write(tmp_path, doc, name="cfg.yaml"):
    p = tmp_path / name
    p.write_text(yaml.safe_dump(doc), encoding="utf-8")
    return p


def merged(**sections):
    doc = json.loads(json.dumps(TINY))
    for k, v in sections.items():
        if isinstance(v, dict):
            doc.setdefault(k, {}).update(v)
        else:
            doc[k] = v
    return doc


@pytest.fixture(scope="module")
def checkpoint(tmp_path_factory):
    """A random-weight model matching the TINY data shape."""
    path = tmp_path_factory.mktemp("ckpt") / "m.ckpt"
    arch = RunConfig().model.to_arch((1, 16, 16), 3)
    arch["widths"] = [2, 4]
    nn.save_checkpoint(_perturb_bn(nn.build_model(arch, 0), 0), path)
    return path


class TestConfig:
    def test_defaults_file(self):
        cfg = load_config(DEFAULTS)
        assert (cfg.adapt.B, cfg.adapt.lr, cfg.adapt.prior_strength, cfg.adapt.steps) == (32, 0.005, 16.0, 1)
        tent = cfg.adaptation_for("tent_batch")
        assert tent.update_rule == "sgd_momentum" and tent.param_filter == "norm_affine_only"

    def test_unknown_key_names_it(self):
        with pytest.raises(ConfigError, match="adapt.foo"):
            parse_config({"adapt": {"foo": 1}})
        with pytest.raises(ConfigError, match="foo"):
            parse_config({"foo": 1})

    @pytest.mark.parametrize("doc", [{"adapt": {"B": "many"}}, {"adapt": {"steps": 0}},
                                     {"eval": {"strategies": ["magic"]}}, {"data": {"source": "s3"}},
                                     {"eval": {"overrides": {"memo": {"bogus": 1}}}}])
    def test_invalid_values(self, doc):
        with pytest.raises(ConfigError):
            parse_config(doc)

    def test_dump_round_trip(self):
        cfg = parse_config({"adapt": {"prior_strength": ".inf"}, "augment": {"ops": ["rotate", "equalize"]}})
        back = parse_config(yaml.safe_load(dump_config(cfg)))
        assert back == cfg and math.isinf(back.adapt.prior_strength)


class TestCli:
    def test_unknown_key_exit_2(self, tmp_path, capsys):
        code = cli.main(["train", "--config", str(write(tmp_path, {"foo": 1})), "--out", str(tmp_path)])
        assert code == 2 and "foo" in capsys.readouterr().err

    def test_missing_config_exit_2(self, tmp_path):
        assert cli.main(["eval", "--config", str(tmp_path / "nope.yaml")]) == 2

    def test_train_writes_loadable_and_reproducible_checkpoint(self, tmp_path):
        cfg = write(tmp_path, TINY)
        for run in ("a", "b"):
            assert cli.main(["train", "--config", str(cfg), "--out", str(tmp_path / run)]) == 0
        model, meta = nn.load_checkpoint(tmp_path / "a" / "model.ckpt")
        assert meta["seed"] == 0 and meta["epochs"] == 1 and "final_train_acc" in meta
        assert model.num_classes == 3
        assert (tmp_path / "a" / "model.ckpt").read_bytes() == (tmp_path / "b" / "model.ckpt").read_bytes()
        manifest = json.loads((tmp_path / "a" / cli.MANIFEST).read_text())
        assert manifest["config"]["data"]["num_classes"] == 3 and "model.ckpt" in manifest["outputs"]
        resolved = load_config(tmp_path / "a" / "resolved_config.yaml")
        assert resolved == dataclasses.replace(load_config(cfg), out_dir=str(tmp_path / "a"))

    def test_divergence_exit_3(self, tmp_path):
        cfg = write(tmp_path, merged(train={"lr": 1e30, "epochs": 2}))
        with np.errstate(all="ignore"):
            assert cli.main(["train", "--config", str(cfg), "--out", str(tmp_path)]) == 3

    def test_eval_missing_checkpoint_exit_2(self, tmp_path):
        cfg = write(tmp_path, merged(eval={"checkpoint": str(tmp_path / "missing.ckpt")}))
        assert cli.main(["eval", "--config", str(cfg), "--out", str(tmp_path)]) == 2

    def test_eval_three_strategies(self, tmp_path, checkpoint):
        doc = merged(eval={"checkpoint": str(checkpoint), "strategies": ["none", "tta", "memo"],
                           "corruptions": ["gaussian_noise", "contrast"], "severities": [2]})
        assert cli.main(["eval", "--config", str(write(tmp_path, doc)), "--out", str(tmp_path)]) == 0
        rows = bench.read_results(tmp_path / "results.csv")
        assert len(rows) == 6
        for kind in ("gaussian_noise", "contrast"):
            assert sorted(r["strategy"] for r in rows if r["corruption"] == kind) == ["memo", "none", "tta"]

    def test_eval_memo_zero_lr_matches_bn_only(self, tmp_path, checkpoint):
        doc = merged(adapt={"lr": 0.0}, eval={"checkpoint": str(checkpoint), "strategies": ["memo", "bn_only"]})
        assert cli.main(["eval", "--config", str(write(tmp_path, doc)), "--out", str(tmp_path)]) == 0
        memo, bn_only = bench.read_results(tmp_path / "results.csv")
        assert memo["error_pct"] == bn_only["error_pct"]

    def test_sweep(self, tmp_path, checkpoint):
        doc = merged(eval={"checkpoint": str(checkpoint), "B_values": [1, 4]})
        assert cli.main(["sweep", "--config", str(write(tmp_path, doc)), "--out", str(tmp_path)]) == 0
        assert [r["B"] for r in bench.read_results(tmp_path / "sweep.csv")] == [1, 4]
        plot = np.loadtxt(tmp_path / "sweep_plot.csv", delimiter=",", skiprows=1)
        assert plot.shape == (2, 3) and np.isfinite(plot).all()

    def test_corrupt_grid_and_regeneration(self, tmp_path):
        doc = merged(eval={"corruptions": ["gaussian_noise", "pixelate"], "severities": [1, 2, 3, 4, 5]})
        cfg = write(tmp_path, doc)
        for run in ("a", "b"):
            assert cli.main(["corrupt", "--config", str(cfg), "--out", str(tmp_path / run)]) == 0
        images = sorted(p.name for p in (tmp_path / "a").glob("*-images.idx"))
        assert len(images) == 10
        for name in images + ["labels.idx"]:
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
        ds = data.load_idx(tmp_path / "a" / images[0], tmp_path / "a" / "labels.idx", num_classes=3)
        assert len(ds) == 6

    @pytest.mark.parametrize("ev", [{"severities": [0]}, {"corruptions": ["fog"]}])
    def test_corrupt_rejects_bad_cells(self, tmp_path, ev):
        cfg = write(tmp_path, merged(eval=ev))
        assert cli.main(["corrupt", "--config", str(cfg), "--out", str(tmp_path)]) == 2

    def test_seed_flag_overrides(self, tmp_path):
        cfg = write(tmp_path, TINY)
        assert cli.main(["corrupt", "--config", str(cfg), "--seed", "9", "--out", str(tmp_path)]) == 0
        assert json.loads((tmp_path / cli.MANIFEST).read_text())["seed"] == 9
