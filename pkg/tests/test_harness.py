import json
import math

import numpy as np
import numpy.testing as npt
import pytest
import torch

from mvprompt.config import TrainConfig, load_config, parse_config_text
from mvprompt.data import make_synthetic
from mvprompt.errors import LoadError, TrainingDiverged, ValidationError
from mvprompt.training import (
    ablate,
    batch_tensors,
    check_finite_loss,
    evaluate,
    load_checkpoint,
    network_from_checkpoint,
    normalized_coords,
    plurality_vote,
    predict_tta,
    save_checkpoint,
    train,
    visualize_prompts,
)


def desk_config(tmp_path, **kwargs) -> TrainConfig:
    base = dict(
        dataset="synthetic",
        synthetic_classes=3,
        synthetic_per_class=8,
        n_points=128,
        shots=4,
        n_views=2,
        mode="full",
        backbone="tiny-cnn",
        image_size=16,
        c1=8,
        c2=8,
        k_neighbors=6,
        token_stride=4,
        lr=5e-3,
        weight_decay=5e-2,
        epochs=2,
        batch_size=6,
        seed=0,
        tta_votes=2,
        out_dir=str(tmp_path / "run"),
    )
    base.update(kwargs)
    return TrainConfig(**base).validate()


class TestConfigFormat:
    def test_parse_key_value_lines(self):
        text = """
        # protocol
        lr = 0.0005
        backbone = tiny-cnn   # inline comment
        beta_range = [-1.2566370614359172, -0.6283185307179586]
        augment = true
        """
        values = parse_config_text(text)
        assert values["lr"] == 0.0005
        assert values["backbone"] == "tiny-cnn"
        assert values["augment"] is True
        assert len(values["beta_range"]) == 2

    def test_unknown_key_rejected(self, tmp_path):
        path = tmp_path / "bad.cfg"
        path.write_text("warp_speed = 9\n")
        with pytest.raises(ValidationError):
            load_config(path)

    def test_missing_file_rejected(self, tmp_path):
        with pytest.raises(ValidationError):
            load_config(tmp_path / "absent.cfg")

    def test_overrides_beat_file(self, tmp_path):
        path = tmp_path / "base.cfg"
        path.write_text("lr = 0.1\nepochs = 5\n")
        config = load_config(path, {"lr": 0.2, "epochs": None})
        assert config.lr == 0.2
        assert config.epochs == 5

    def test_malformed_line_rejected(self):
        with pytest.raises(ValidationError):
            parse_config_text("just some words\n")

    def test_validation_catches_bad_values(self, tmp_path):
        with pytest.raises(ValidationError):
            desk_config(tmp_path, mode="bogus")
        with pytest.raises(ValidationError):
            desk_config(tmp_path, lr=-1.0)
        with pytest.raises(ValidationError):
            desk_config(tmp_path, dataset="imagenet")


class TestTrainLoop:
    def test_smoke_writes_artifacts(self, tmp_path):
        config = desk_config(tmp_path)
        ckpt = train(config)
        out = tmp_path / "run"
        assert (out / "checkpoint.pt").exists()
        assert (out / "config.json").exists()
        lines = (out / "metrics.jsonl").read_text().splitlines()
        assert len(lines) == config.epochs
        assert all("train_loss" in json.loads(line) for line in lines)
        assert len(ckpt.metrics) == config.epochs

    def test_cosine_schedule_endpoints(self, tmp_path):
        config = desk_config(tmp_path, epochs=4, shots=2)  # no held-out slice
        ckpt = train(config)
        assert ckpt.metrics[0]["lr"] == pytest.approx(config.lr)
        want_final = config.lr * 0.5 * (1.0 + math.cos(math.pi * 3 / 4))
        assert ckpt.metrics[-1]["lr"] == pytest.approx(want_final, rel=1e-6)

    def test_determinism_identical_loss_curves(self, tmp_path):
        a = train(desk_config(tmp_path / "a"))
        b = train(desk_config(tmp_path / "b"))
        for ra, rb in zip(a.metrics, b.metrics):
            assert abs(ra["train_loss"] - rb["train_loss"]) < 1e-6
            assert ra["train_oacc"] == rb["train_oacc"]

    def test_frozen_weights_byte_identical_after_training(self, tmp_path):
        config = desk_config(tmp_path)
        from mvprompt.training import build_network

        torch.manual_seed(config.seed)
        reference = build_network(config, config.synthetic_classes)
        frozen_before = {
            name: p.detach().clone()
            for name, p in reference.named_parameters()
            if not p.requires_grad
        }
        ckpt = train(config)
        network, _ = network_from_checkpoint(ckpt)
        for name, p in network.named_parameters():
            if not p.requires_grad:
                assert torch.equal(p, frozen_before[name]), name

    def test_divergence_guard_dumps_batch(self, tmp_path):
        coords = torch.zeros(2, 8, 3)
        labels = torch.tensor([0, 1])
        with pytest.raises(TrainingDiverged) as err:
            check_finite_loss(torch.tensor(float("nan")), coords, labels, 3, 7, tmp_path)
        dump = np.load(err.value.dump_path)
        assert dump["coords"].shape == (2, 8, 3)
        npt.assert_array_equal(dump["labels"], [0, 1])
        assert int(dump["epoch"]) == 3 and int(dump["step"]) == 7

    def test_finite_loss_passes_guard(self, tmp_path):
        check_finite_loss(torch.tensor(1.0), None, None, 0, 0, tmp_path)


class TestCheckpoint:
    def test_roundtrip_bit_identical_forward(self, tmp_path):
        config = desk_config(tmp_path)
        ckpt = train(config)
        network, _ = network_from_checkpoint(ckpt)
        ds = make_synthetic(3, 8, 128, seed=99)
        clouds = normalized_coords(ds)
        coords, idx = batch_tensors(clouds, [0, 5, 11], config.k_neighbors)
        with torch.no_grad():
            before = network(coords, idx)
        path = tmp_path / "copy.pt"
        save_checkpoint(ckpt, path)
        reloaded, _ = network_from_checkpoint(load_checkpoint(path))
        with torch.no_grad():
            after = reloaded(coords, idx)
        npt.assert_array_equal(before.numpy(), after.numpy())

    def test_missing_checkpoint_is_load_error(self, tmp_path):
        with pytest.raises(LoadError):
            load_checkpoint(tmp_path / "none.pt")

    def test_config_snapshot_restores(self, tmp_path):
        config = desk_config(tmp_path)
        ckpt = train(config)
        assert TrainConfig.from_dict(ckpt.config) == config


class TestTta:
    def test_plurality_tie_breaks_low_index(self):
        votes = np.array([[0, 1, 0, 1, 2]])  # 2-2-1 between classes 0 and 1
        npt.assert_array_equal(plurality_vote(votes, 3), [0])
        npt.assert_array_equal(plurality_vote(np.array([[2, 2, 1]]), 3), [2])

    def test_single_vote_equals_plain_eval(self, tmp_path):
        config = desk_config(tmp_path)
        ckpt = train(config)
        network, _ = network_from_checkpoint(ckpt)
        ds = make_synthetic(3, 8, 128, seed=config.seed)
        test_idx = ds.indices("test")
        clouds = [normalized_coords(ds)[i] for i in test_idx]
        preds, _, _ = predict_tta(
            network, clouds, config.k_neighbors, 1, np.random.default_rng(0),
            config.alpha_range, config.beta_range, 3,
        )
        plain = []
        with torch.no_grad():
            for i in range(len(clouds)):
                coords, idx = batch_tensors(clouds, [i], config.k_neighbors)
                plain.append(int(network(coords, idx).argmax()))
        npt.assert_array_equal(preds, plain)

    def test_matches_scripted_oracle(self, tmp_path):
        config = desk_config(tmp_path)
        ckpt = train(config)
        network, _ = network_from_checkpoint(ckpt)
        ds = make_synthetic(3, 8, 128, seed=config.seed)
        clouds = [normalized_coords(ds)[i] for i in ds.indices("test")][:4]

        preds, _, votes = predict_tta(
            network, clouds, config.k_neighbors, 5, np.random.default_rng(123),
            config.alpha_range, config.beta_range, 3,
        )

        # scripted re-run: same draw order (per vote, per cloud), same batching rule
        from mvprompt.geometry import RotationSpec, sample_rotation

        rng = np.random.default_rng(123)
        spec = RotationSpec(tuple(config.alpha_range), tuple(config.beta_range), 0)
        want_votes = np.zeros((4, 5), dtype=np.int64)
        with torch.no_grad():
            for v in range(5):
                rotations = None if v == 0 else {i: sample_rotation(spec, rng) for i in range(4)}
                for i in range(4):
                    c = clouds[i] if rotations is None else clouds[i] @ rotations[i].T
                    coords, idx = batch_tensors([c], [0], config.k_neighbors)
                    want_votes[i, v] = int(network(coords, idx).argmax())
        npt.assert_array_equal(votes, want_votes)
        npt.assert_array_equal(preds, plurality_vote(want_votes, 3))

    def test_evaluate_report_shape_and_determinism(self, tmp_path):
        config = desk_config(tmp_path)
        ckpt = train(config)
        a = evaluate(ckpt, tta_votes=3)
        b = evaluate(ckpt, tta_votes=3)
        assert a == b
        assert set(a) == {"oacc", "per_class", "n_test", "tta_votes"}
        assert a["n_test"] == 6
        assert 0.0 <= a["oacc"] <= 1.0

    def test_invalid_votes_rejected(self, tmp_path):
        config = desk_config(tmp_path)
        ckpt = train(config)
        with pytest.raises(ValidationError):
            evaluate(ckpt, tta_votes=0)


class TestAblate:
    def test_grid_must_match_outside_axes(self, tmp_path):
        a = desk_config(tmp_path, mode="baseline", n_views=1)
        b = desk_config(tmp_path, mode="full", n_views=2, lr=1.0)
        with pytest.raises(ValidationError):
            ablate([a, b])

    def test_rows_mirror_table_axes(self, tmp_path):
        base = desk_config(tmp_path, epochs=1, shots=2)
        rows = ablate(
            [
                base.replace(mode="baseline", n_views=1),
                base.replace(mode="attention_only", n_views=2),
                base.replace(mode="full", n_views=2),
            ]
        )
        assert [(r["attention_fusion"], r["conv_fusion"], r["views"]) for r in rows] == [
            (False, False, 1),
            (True, False, 2),
            (True, True, 2),
        ]
        assert all(0.0 <= r["oacc"] <= 1.0 for r in rows)

    def test_repeated_cell_same_seed_identical(self, tmp_path):
        base = desk_config(tmp_path, epochs=1, shots=2)
        first = ablate([base])[0]["oacc"]
        second = ablate([base])[0]["oacc"]
        assert first == second

    def test_full_scale_grid_structure(self, tmp_path):
        # the seven-row grid: no-fusion 1v/4v, attention-only 4v, full 2/4/6/8v
        base = desk_config(tmp_path, epochs=1, shots=2, synthetic_classes=2,
                           synthetic_per_class=4, tta_votes=1)
        cells = [
            ("baseline", 1), ("baseline", 4), ("attention_only", 4),
            ("full", 2), ("full", 4), ("full", 6), ("full", 8),
        ]
        rows = ablate([base.replace(mode=m, n_views=v) for m, v in cells])
        assert len(rows) == 7
        assert [(r["attention_fusion"], r["conv_fusion"], r["views"]) for r in rows] == [
            (False, False, 1), (False, False, 4), (True, False, 4),
            (True, True, 2), (True, True, 4), (True, True, 6), (True, True, 8),
        ]


class TestVisualize:
    def test_exports_one_file_per_view_plus_render(self, tmp_path):
        config = desk_config(tmp_path, n_views=2, epochs=1, shots=2)
        ckpt = train(config)
        cloud = make_synthetic(3, 4, 128, seed=1).clouds[0]
        paths = visualize_prompts(ckpt, cloud, tmp_path / "viz")
        assert len(paths) == 3  # 2 prompts + 1 scatter render
        for p in paths:
            assert (tmp_path / "viz").exists()
            assert p.endswith(".png")

    def test_pixel_values_recompute_from_minmax_formula(self, tmp_path):
        from PIL import Image

        config = desk_config(tmp_path, n_views=1, epochs=1, shots=2)
        ckpt = train(config)
        cloud = make_synthetic(3, 4, 128, seed=2).clouds[5]
        out = tmp_path / "viz"
        paths = visualize_prompts(ckpt, cloud, out)

        network, cfg = network_from_checkpoint(ckpt)
        from mvprompt.geometry import normalize_cloud

        coords, idx = batch_tensors([normalize_cloud(cloud).coords], [0], cfg.k_neighbors)
        with torch.no_grad():
            prompt = network.prompts(coords, idx)[0, 0].numpy()
        lo, hi = prompt.min(), prompt.max()
        want = np.round((prompt - lo) / (hi - lo) * 255.0).astype(np.uint8).transpose(1, 2, 0)
        got = np.asarray(Image.open(paths[0]))
        npt.assert_array_equal(got, want)

    def test_constant_prompt_maps_to_mid_gray(self):
        from mvprompt.training import _to_display_image

        img = _to_display_image(np.full((3, 4, 4), 2.0))
        npt.assert_array_equal(img, np.full((4, 4, 3), 128))
