"""Model assembly: channel scaling, neck topologies, head sets, checkpoints."""

import itertools

import pytest
import torch

from slyolo import ModelConfig, build_model, load_checkpoint, save_checkpoint
from slyolo.errors import ConfigError, ShapeError
from slyolo.model import FEATURE_LEVELS, Backbone


def n_params(module):
    return sum(p.numel() for p in module.parameters())


class TestConfig:
    def test_channel_scaling(self):
        cfg = ModelConfig(width=0.5, max_channels=1024)
        assert [cfg.channels(c) for c in (128, 256, 512, 1024)] == [64, 128, 256, 512]

    def test_depth_scaling(self):
        cfg = ModelConfig(depth=0.33)
        assert [cfg.repeats(r) for r in (3, 6, 6, 3)] == [1, 2, 2, 1]

    def test_rounding_floor(self):
        cfg = ModelConfig(width=0.1, max_channels=1024)
        assert cfg.channels(64) == 8

    def test_validation(self):
        with pytest.raises(ConfigError):
            ModelConfig(neck="fpn")
        with pytest.raises(ConfigError):
            ModelConfig(width=0.0)
        with pytest.raises(ConfigError):
            ModelConfig.from_dict({"neck": "pan", "bogus": 1})

    def test_yaml_roundtrip(self, tmp_path):
        cfg = ModelConfig(neck="bifpn", nc=10)
        path = tmp_path / "m.yaml"
        cfg.to_yaml(path)
        assert ModelConfig.from_yaml(path) == cfg

    def test_overrides(self):
        cfg = ModelConfig().apply_overrides({"neck": "pan", "p2": "false", "width": "0.25"})
        assert (cfg.neck, cfg.p2, cfg.width) == ("pan", False, 0.25)
        with pytest.raises(ConfigError):
            ModelConfig().apply_overrides({"unknown": "1"})


class TestBackbone:
    def test_tap_channels(self):
        cfg = ModelConfig(width=0.5, max_channels=1024)
        assert Backbone(cfg).tap_channels == (64, 128, 256, 512)

    def test_tap_resolutions(self, tiny_cfg):
        bb = Backbone(tiny_cfg).eval()
        b2, b3, b4, b5 = bb(torch.randn(1, 3, 640, 640))
        assert b2.shape[-2:] == (160, 160)
        assert b5.shape[-2:] == (20, 20)


class TestForward:
    def test_four_levels_at_640(self, tiny_cfg):
        model = build_model(tiny_cfg, seed=0).eval()
        raw = model(torch.randn(1, 3, 640, 640))
        assert [t.shape[-1] for t in raw.cls] == [160, 80, 40, 20]
        assert raw.strides == [4, 8, 16, 32]

    def test_three_levels_without_p2(self):
        cfg = ModelConfig(width=0.25, max_channels=256, p2=False)
        model = build_model(cfg, seed=0).eval()
        raw = model(torch.randn(1, 3, 320, 320))
        assert [t.shape[-1] for t in raw.cls] == [40, 20, 10]

    def test_head_channel_counts(self, tiny_cfg):
        model = build_model(tiny_cfg, seed=0).eval()
        raw = model(torch.randn(1, 3, 64, 64))
        assert all(t.shape[1] == 10 for t in raw.cls)
        assert all(t.shape[1] == 64 for t in raw.box)  # 4 * reg_max

    def test_divisibility_error(self, tiny_cfg):
        model = build_model(tiny_cfg, seed=0).eval()
        with pytest.raises(ShapeError):
            model(torch.randn(1, 3, 630, 640))

    def test_level_index(self, tiny_cfg):
        model = build_model(tiny_cfg, seed=0)
        assert model.level_index("P2") == 0
        no_p2 = build_model(ModelConfig(width=0.25, max_channels=256, p2=False), seed=0)
        assert no_p2.level_index("P3") == 0
        with pytest.raises(ConfigError):
            no_p2.level_index("P2")

    def test_feature_level_map_sizes(self):
        assert [FEATURE_LEVELS[n].map_size(640) for n in ("P2", "P3", "P4", "P5")] == [160, 80, 40, 20]


class TestConfigMatrix:
    @pytest.mark.parametrize("neck,block,down,p2", list(itertools.product(
        ("pan", "bifpn", "hepan"), ("c3", "c2f", "c2fdcb"), ("conv", "scdown"), (True, False)
    )))
    def test_builds_and_runs(self, neck, block, down, p2):
        cfg = ModelConfig(neck=neck, block=block, down=down, p2=p2,
                          width=0.25, max_channels=256)
        model = build_model(cfg, seed=0).eval()
        with torch.no_grad():
            raw = model(torch.randn(1, 3, 64, 64))
        strides = (4, 8, 16, 32) if p2 else (8, 16, 32)
        assert [t.shape[-1] for t in raw.cls] == [64 // s for s in strides]

    def test_neck_variants_same_shape_signature(self):
        shapes = {}
        for neck in ("pan", "bifpn", "hepan"):
            cfg = ModelConfig(neck=neck, width=0.25, max_channels=256)
            model = build_model(cfg, seed=0).eval()
            with torch.no_grad():
                raw = model(torch.randn(1, 3, 64, 64))
            shapes[neck] = [tuple(t.shape) for t in raw.box + raw.cls]
        assert shapes["pan"] == shapes["bifpn"] == shapes["hepan"]


class TestAblationDirections:
    def test_param_orderings(self):
        kw = dict(width=0.5, max_channels=1024)
        pan = build_model(ModelConfig(neck="pan", block="c2f", down="conv", **kw), seed=0)
        hepan = build_model(ModelConfig(neck="hepan", block="c2f", down="conv", **kw), seed=0)
        hepan_dcb = build_model(ModelConfig(neck="hepan", block="c2fdcb", down="conv", **kw), seed=0)
        slyolo = build_model(ModelConfig(neck="hepan", block="c2fdcb", down="scdown", **kw), seed=0)
        assert n_params(pan) < n_params(hepan)
        assert n_params(hepan_dcb) < n_params(hepan)
        assert n_params(slyolo) < n_params(hepan_dcb)


class TestBiFPN:
    def test_equal_weights_give_mean_combination(self):
        from slyolo.model import FusionWeights

        fw = FusionWeights(3)
        xs = [torch.randn(1, 4, 8, 8) for _ in range(3)]
        out = fw(xs)
        for x, y in zip(xs, out):
            assert torch.allclose(y, x / 3, rtol=1e-3, atol=1e-6)

    def test_weights_nonnegative_after_updates(self):
        from slyolo.model import FusionWeights

        fw = FusionWeights(2)
        fw.raw.data = torch.tensor([-5.0, 3.0])  # raw can go negative, scales cannot
        with torch.no_grad():
            scales = fw.scales()
        assert (scales >= 0).all()
        assert float(scales.sum()) <= 1.0


class TestDeterminism:
    def test_same_seed_same_parameters(self, tiny_cfg):
        a = build_model(tiny_cfg, seed=123)
        b = build_model(tiny_cfg, seed=123)
        for (ka, va), (kb, vb) in zip(a.state_dict().items(), b.state_dict().items()):
            assert ka == kb
            assert torch.equal(va, vb)

    def test_different_seed_differs(self, tiny_cfg):
        a = build_model(tiny_cfg, seed=1)
        b = build_model(tiny_cfg, seed=2)
        assert any(
            not torch.equal(va, vb)
            for va, vb in zip(a.state_dict().values(), b.state_dict().values())
        )


class TestCheckpoint:
    def test_roundtrip(self, tiny_cfg, tmp_path):
        model = build_model(tiny_cfg, seed=0)
        path = tmp_path / "m.pt"
        save_checkpoint(model, path, extra={"note": "test"})
        loaded, payload = load_checkpoint(path)
        assert payload["extra"]["note"] == "test"
        for va, vb in zip(model.state_dict().values(), loaded.state_dict().values()):
            assert torch.equal(va, vb)

    def test_fused_roundtrip(self, tiny_cfg, tmp_path):
        model = build_model(tiny_cfg, seed=0).eval()
        model.fuse()
        path = tmp_path / "fused.pt"
        save_checkpoint(model, path)
        loaded, payload = load_checkpoint(path)
        assert payload["fused"] and loaded.fused
        x = torch.randn(1, 3, 64, 64)
        with torch.no_grad():
            a, b = model(x), loaded(x)
        for ta, tb in zip(a.box + a.cls, b.box + b.cls):
            assert torch.equal(ta, tb)

    def test_state_dict_paths_are_sectioned(self, tiny_cfg):
        keys = list(build_model(tiny_cfg, seed=0).state_dict())
        assert all(k.split(".")[0] in ("backbone", "neck", "head") for k in keys)
