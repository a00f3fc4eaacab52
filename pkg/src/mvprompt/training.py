"""Training loop, TTA evaluation, ablation grids, and prompt export.

Optimization follows the decoupled-weight-decay adaptive scheme (AdamW)
with a cosine-annealed learning rate over the full epoch budget. Rotation
augmentation draws one rotation per sample per epoch; neighbor graphs are
recomputed on the augmented coordinates. All randomness (shuffling,
rotations, TTA) flows from the config seed, so identical configs reproduce
identical loss curves, splits, and TTA decisions.

Test-time augmentation runs ``tta_votes`` forward passes per test cloud,
the first with the identity rotation and the rest randomly rotated, and
takes the plurality class (ties resolved toward the lowest class index).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np
import torch

from .classify import overall_accuracy, xent_loss
from .config import TrainConfig
from .data import Dataset, FewShotSplit, kshot_split, load_dataset
from .errors import LoadError, TrainingDiverged, ValidationError
from .geometry import PointCloud, RotationSpec, knn, normalize_cloud, sample_rotation
from .network import MultiViewPromptNetwork


@dataclass
class Checkpoint:
    """Best model state plus everything needed to rebuild and rerun it."""

    model_state: dict
    optimizer_state: dict
    epoch: int
    config: dict
    metrics: List[dict]
    class_names: List[str]


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(
        {
            "model_state": ckpt.model_state,
            "optimizer_state": ckpt.optimizer_state,
            "epoch": ckpt.epoch,
            "config": ckpt.config,
            "metrics": ckpt.metrics,
            "class_names": ckpt.class_names,
        },
        path,
    )


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise LoadError(f"checkpoint not found: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=False)
    return Checkpoint(**payload)


def plurality_vote(vote_matrix: np.ndarray, num_classes: int) -> np.ndarray:
    """Most-voted class per row; ties resolve to the lowest class index."""
    return np.array(
        [np.bincount(row, minlength=num_classes).argmax() for row in vote_matrix],
        dtype=np.int64,
    )


def build_network(config: TrainConfig, num_classes: int) -> MultiViewPromptNetwork:
    return MultiViewPromptNetwork(
        num_classes=num_classes,
        n_views=config.n_views,
        mode=config.mode,
        backbone=config.backbone,
        weights_path=config.weights_path,
        c1=config.c1,
        c2=config.c2,
        k_neighbors=config.k_neighbors,
        image_size=config.image_size,
        token_stride=config.token_stride,
        seed=config.seed,
    )


def network_from_checkpoint(ckpt: Checkpoint) -> tuple[MultiViewPromptNetwork, TrainConfig]:
    config = TrainConfig.from_dict(ckpt.config)
    network = build_network(config, len(ckpt.class_names))
    network.load_state_dict(ckpt.model_state)
    network.eval()
    return network, config


def normalized_coords(dataset: Dataset) -> list[np.ndarray]:
    return [normalize_cloud(c).coords for c in dataset.clouds]


def batch_tensors(
    clouds: Sequence[np.ndarray],
    idxs: Sequence[int],
    k: int,
    rotations: Optional[dict] = None,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Stack clouds into (B, N, 3) float32 coords and (B, N, k) neighbor indices.

    Rotations (index -> 3x3 matrix) are applied before the neighbor search,
    matching the policy of recomputing graphs per augmented input.
    """
    coords_list, graph_list = [], []
    for i in idxs:
        coords = clouds[i]
        if rotations is not None and rotations.get(i) is not None:
            coords = coords @ rotations[i].T
        graph_list.append(knn(PointCloud(coords), k).indices)
        coords_list.append(coords)
    coords = torch.as_tensor(np.stack(coords_list), dtype=torch.float32)
    neighbor_idx = torch.as_tensor(np.stack(graph_list), dtype=torch.long)
    return coords, neighbor_idx


def _dump_diverged_batch(out_dir, coords, labels, epoch, step) -> str:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    dump_path = out_dir / "diverged_batch.npz"
    np.savez(
        dump_path,
        coords=coords.detach().cpu().numpy(),
        labels=labels.detach().cpu().numpy(),
        epoch=np.array(epoch),
        step=np.array(step),
    )
    return str(dump_path)


def check_finite_loss(loss: torch.Tensor, coords, labels, epoch, step, dump_dir) -> None:
    if torch.isfinite(loss):
        return
    dump_path = None
    if dump_dir is not None:
        dump_path = _dump_diverged_batch(dump_dir, coords, labels, epoch, step)
    raise TrainingDiverged(
        f"non-finite loss {float(loss.detach())} at epoch {epoch}, step {step}"
        + (f"; offending batch dumped to {dump_path}" if dump_path else ""),
        dump_path,
    )


def run_training(
    network: MultiViewPromptNetwork,
    clouds: Sequence[np.ndarray],
    labels: np.ndarray,
    train_idx: np.ndarray,
    config: TrainConfig,
    val_idx: Optional[np.ndarray] = None,
    dump_dir=None,
    log=None,
) -> tuple[List[dict], dict, int, dict]:
    """Optimize the trainable parameters.

    Returns (per-epoch metrics, best model state, best epoch, final
    optimizer state). Best is chosen by held-out oAcc when ``val_idx`` is
    given, else the final epoch.
    """
    optimizer = torch.optim.AdamW(
        network.trainable_parameters(), lr=config.lr, weight_decay=config.weight_decay
    )
    scheduler = torch.optim.lr_scheduler.CosineAnnealingLR(optimizer, T_max=config.epochs)
    rng = np.random.default_rng(config.seed)
    rot_spec = RotationSpec(tuple(config.alpha_range), tuple(config.beta_range), config.seed)
    labels_t = torch.as_tensor(labels, dtype=torch.long)
    metrics: List[dict] = []
    best_acc, best_epoch = -1.0, config.epochs - 1
    best_state = None
    step = 0
    for epoch in range(config.epochs):
        network.train()
        order = rng.permutation(train_idx)
        losses, hits, seen = [], 0, 0
        for start in range(0, order.size, config.batch_size):
            batch = order[start : start + config.batch_size]
            rotations = None
            if config.augment:
                rotations = {int(i): sample_rotation(rot_spec, rng) for i in batch}
            coords, neighbor_idx = batch_tensors(clouds, batch, config.k_neighbors, rotations)
            target = labels_t[batch]
            logits = network(coords, neighbor_idx)
            loss = xent_loss(logits, target)
            check_finite_loss(loss, coords, target, epoch, step, dump_dir)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            losses.append(float(loss.detach()))
            hits += int((logits.argmax(dim=-1) == target).sum())
            seen += batch.size
            step += 1
        lr_now = optimizer.param_groups[0]["lr"]
        scheduler.step()
        row = {
            "epoch": epoch,
            "lr": lr_now,
            "train_loss": float(np.mean(losses)),
            "train_oacc": hits / max(seen, 1),
        }
        if val_idx is not None and val_idx.size:
            row["val_oacc"] = evaluate_plain(network, clouds, labels, val_idx, config)
            if row["val_oacc"] >= best_acc:
                best_acc = row["val_oacc"]
                best_epoch = epoch
                best_state = {k: v.detach().clone() for k, v in network.state_dict().items()}
        metrics.append(row)
        if log is not None:
            log(row)
    if best_state is None:
        best_epoch = config.epochs - 1
        best_state = {k: v.detach().clone() for k, v in network.state_dict().items()}
    return metrics, best_state, best_epoch, optimizer.state_dict()


@torch.no_grad()
def evaluate_plain(
    network: MultiViewPromptNetwork,
    clouds: Sequence[np.ndarray],
    labels: np.ndarray,
    idxs: np.ndarray,
    config: TrainConfig,
    batch_size: int = 32,
) -> float:
    """Single-pass (no TTA, no augmentation) oAcc over the given indices."""
    network.eval()
    preds = []
    for start in range(0, idxs.size, batch_size):
        batch = idxs[start : start + batch_size]
        coords, neighbor_idx = batch_tensors(clouds, batch, config.k_neighbors)
        preds.append(network(coords, neighbor_idx).argmax(dim=-1).numpy())
    return overall_accuracy(np.concatenate(preds), labels[idxs])


@torch.no_grad()
def predict_tta(
    network: MultiViewPromptNetwork,
    clouds: Sequence[np.ndarray],
    k: int,
    votes: int,
    rng: np.random.Generator,
    alpha_range,
    beta_range,
    num_classes: int,
    batch_size: int = 32,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """TTA voting over normalized clouds.

    Vote 0 uses the identity rotation (so one vote equals plain
    evaluation); later votes draw one rotation per cloud from ``rng``.
    Returns (plurality predictions, mean probabilities, vote matrix).
    """
    if votes < 1:
        raise ValidationError(f"tta_votes must be >= 1, got {votes}")
    network.eval()
    n = len(clouds)
    vote_matrix = np.zeros((n, votes), dtype=np.int64)
    prob_sum = np.zeros((n, num_classes))
    spec = RotationSpec(tuple(alpha_range), tuple(beta_range), 0)
    for v in range(votes):
        rotations = None
        if v > 0:
            rotations = {i: sample_rotation(spec, rng) for i in range(n)}
        for start in range(0, n, batch_size):
            idxs = list(range(start, min(start + batch_size, n)))
            coords, neighbor_idx = batch_tensors(clouds, idxs, k, rotations)
            logits = network(coords, neighbor_idx)
            probs = torch.softmax(logits, dim=-1).numpy()
            vote_matrix[idxs, v] = probs.argmax(axis=-1)
            prob_sum[idxs] += probs
    preds = plurality_vote(vote_matrix, num_classes)
    return preds, prob_sum / votes, vote_matrix


def heldout_slice(split: FewShotSplit, shots: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Carve a per-class validation slice (shots // 4) out of the K-shot set.

    Used for best-checkpoint selection when K >= 4; below that the full
    K-shot set trains and the final epoch is kept.
    """
    if shots < 4:
        return split.train_indices, np.array([], dtype=np.int64)
    rng = np.random.default_rng(seed + 1)
    train_parts, val_parts = [], []
    for cls in sorted(split.per_class):
        members = split.per_class[cls]
        n_val = min(max(shots // 4, 1), max(members.size - 1, 0))
        chosen = rng.choice(members, size=n_val, replace=False) if n_val else np.array([], dtype=np.int64)
        val_parts.append(chosen)
        train_parts.append(np.setdiff1d(members, chosen))
    return np.concatenate(train_parts), np.concatenate(val_parts)


def train(config: TrainConfig, log=None) -> Checkpoint:
    """Run the full pipeline on the configured dataset and persist results.

    Writes ``checkpoint.pt``, ``metrics.jsonl`` (one JSON record per epoch)
    and ``config.json`` into ``config.out_dir``.
    """
    config.validate()
    torch.manual_seed(config.seed)
    out_dir = Path(config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    dataset = load_dataset(
        config.dataset,
        config.data_root,
        n_points=config.n_points,
        seed=config.seed,
        synthetic_classes=config.synthetic_classes,
        synthetic_per_class=config.synthetic_per_class,
    )
    split = kshot_split(dataset, config.shots, config.seed)
    clouds = normalized_coords(dataset)
    labels = dataset.labels
    train_idx, val_idx = heldout_slice(split, config.shots, config.seed)

    network = build_network(config, len(dataset.class_names))
    metrics, best_state, best_epoch, optimizer_state = run_training(
        network,
        clouds,
        labels,
        train_idx,
        config,
        val_idx=val_idx if val_idx.size else None,
        dump_dir=out_dir,
        log=log,
    )
    ckpt = Checkpoint(
        model_state=best_state,
        optimizer_state=optimizer_state,
        epoch=best_epoch,
        config=config.to_dict(),
        metrics=metrics,
        class_names=list(dataset.class_names),
    )
    save_checkpoint(ckpt, out_dir / "checkpoint.pt")
    with open(out_dir / "metrics.jsonl", "w") as f:
        for row in metrics:
            f.write(json.dumps(row) + "\n")
    with open(out_dir / "config.json", "w") as f:
        f.write(json.dumps(config.to_dict()) + "\n")
    return ckpt


def evaluate(
    ckpt: Checkpoint,
    tta_votes: Optional[int] = None,
    data_root=None,
    seed: Optional[int] = None,
) -> dict:
    """TTA-voted oAcc report over the checkpoint's test split."""
    network, config = network_from_checkpoint(ckpt)
    if data_root is not None:
        config = config.replace(data_root=str(data_root))
    votes = config.tta_votes if tta_votes is None else int(tta_votes)
    eval_seed = config.seed if seed is None else int(seed)
    dataset = load_dataset(
        config.dataset,
        config.data_root,
        n_points=config.n_points,
        seed=config.seed,
        synthetic_classes=config.synthetic_classes,
        synthetic_per_class=config.synthetic_per_class,
    )
    test_idx = dataset.indices("test")
    clouds = [normalize_cloud(dataset.clouds[i]).coords for i in test_idx]
    labels = dataset.labels[test_idx]
    rng = np.random.default_rng(eval_seed)
    preds, _, _ = predict_tta(
        network,
        clouds,
        config.k_neighbors,
        votes,
        rng,
        config.alpha_range,
        config.beta_range,
        num_classes=len(ckpt.class_names),
    )
    per_class = {}
    for cls, name in enumerate(ckpt.class_names):
        mask = labels == cls
        if mask.any():
            per_class[name] = overall_accuracy(preds[mask], labels[mask])
    return {
        "oacc": overall_accuracy(preds, labels),
        "per_class": per_class,
        "n_test": int(labels.size),
        "tta_votes": votes,
    }


ABLATION_AXES = {"mode", "n_views", "out_dir", "seed"}


def ablate(configs: Sequence[TrainConfig], seeds: Optional[Sequence[int]] = None) -> list[dict]:
    """Train/evaluate each (mode, views) cell; configs may differ only there.

    With multiple seeds each cell reports mean oAcc plus min/max across
    seeds. Rows mirror the ablation table axes: attention fusion on unless
    baseline, conv fusion only in full mode.
    """
    if not configs:
        raise ValidationError("ablate needs at least one config")
    reference = {k: v for k, v in configs[0].to_dict().items() if k not in ABLATION_AXES}
    for cfg in configs[1:]:
        other = {k: v for k, v in cfg.to_dict().items() if k not in ABLATION_AXES}
        if other != reference:
            diff = sorted(k for k in other if other[k] != reference[k])
            raise ValidationError(
                f"ablation configs may differ only in mode/views, found differences in {diff}"
            )
    rows = []
    for cfg in configs:
        cell_seeds = list(seeds) if seeds else [cfg.seed]
        accs = []
        for s in cell_seeds:
            run_cfg = cfg.replace(
                seed=int(s),
                out_dir=str(Path(cfg.out_dir) / f"{cfg.mode}_{cfg.n_views}v_seed{s}"),
            )
            ckpt = train(run_cfg)
            accs.append(evaluate(ckpt)["oacc"])
        rows.append(
            {
                "attention_fusion": cfg.mode != "baseline",
                "conv_fusion": cfg.mode == "full",
                "views": cfg.n_views,
                "oacc": float(np.mean(accs)),
                "oacc_min": float(np.min(accs)),
                "oacc_max": float(np.max(accs)),
                "seeds": cell_seeds,
            }
        )
    return rows


def _to_display_image(prompt: np.ndarray) -> np.ndarray:
    """Min-max normalize one (3, H, W) prompt to an (H, W, 3) uint8 image.

    A constant prompt (min == max) maps to mid-gray.
    """
    lo, hi = float(prompt.min()), float(prompt.max())
    if hi > lo:
        unit = (prompt - lo) / (hi - lo)
    else:
        unit = np.full_like(prompt, 0.5)
    return np.round(unit * 255.0).astype(np.uint8).transpose(1, 2, 0)


def visualize_prompts(ckpt: Checkpoint, cloud: PointCloud, out_dir) -> list[str]:
    """Export one PNG per view prompt plus a scatter render of the cloud."""
    from PIL import Image

    network, config = network_from_checkpoint(ckpt)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    coords_np = normalize_cloud(cloud).coords
    with torch.no_grad():
        coords, neighbor_idx = batch_tensors([coords_np], [0], config.k_neighbors)
        prompts = network.prompts(coords, neighbor_idx)[0].numpy()  # (M, 3, H, W)
    paths = []
    for m in range(prompts.shape[0]):
        path = out_dir / f"prompt_view{m}.png"
        Image.fromarray(_to_display_image(prompts[m]), mode="RGB").save(path)
        paths.append(str(path))
    scatter_path = out_dir / "point_cloud.png"
    _scatter_render(coords_np, scatter_path)
    paths.append(str(scatter_path))
    return paths


def _scatter_render(coords: np.ndarray, path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig = plt.figure(figsize=(4, 4))
    ax = fig.add_subplot(projection="3d")
    ax.scatter(coords[:, 0], coords[:, 2], coords[:, 1], s=2)
    ax.set_axis_off()
    fig.savefig(path, dpi=120, bbox_inches="tight")
    plt.close(fig)
