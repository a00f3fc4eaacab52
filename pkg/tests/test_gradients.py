"""Central finite-difference checks for every learnable operation (float64),
plus the freeze-partition gradient contracts of the full network."""

import numpy as np
import numpy.testing as npt
import torch

from mvprompt.classify import ClassificationHead
from mvprompt.fusion import PromptFusion, TokenSequence
from mvprompt.geometry import EdgeFeatureNet, PointCloud, PointLift, knn
from mvprompt.network import MultiViewPromptNetwork


def fd_check(module, forward_fn, h=1e-6, rtol=1e-4, atol=1e-6):
    """Compare autograd parameter gradients against central differences."""
    loss = forward_fn()
    named = [(n, p) for n, p in module.named_parameters() if p.requires_grad]
    grads = torch.autograd.grad(loss, [p for _, p in named], allow_unused=True)
    for (name, param), grad in zip(named, grads):
        analytic = (
            np.zeros(tuple(param.shape)) if grad is None else grad.detach().numpy().copy()
        )
        fd = np.zeros_like(analytic)
        flat = param.data.reshape(-1)
        fd_flat = fd.reshape(-1)
        for i in range(flat.numel()):
            orig = float(flat[i])
            flat[i] = orig + h
            up = float(forward_fn().detach())
            flat[i] = orig - h
            down = float(forward_fn().detach())
            flat[i] = orig
            fd_flat[i] = (up - down) / (2.0 * h)
        npt.assert_allclose(analytic, fd, rtol=rtol, atol=atol, err_msg=name)


def projection_loss(output: torch.Tensor, seed: int = 0) -> torch.Tensor:
    gen = torch.Generator().manual_seed(seed)
    weights = torch.randn(output.shape, generator=gen, dtype=output.dtype)
    return (output * weights).sum()


class TestGeometryGradients:
    def test_point_lift(self):
        lift = PointLift(4, seed=0).double()
        coords = torch.randn(12, 3, generator=torch.Generator().manual_seed(1)).double()
        fd_check(lift, lambda: projection_loss(lift(coords)))

    def test_edge_feature_net(self):
        rng = np.random.default_rng(2)
        coords = rng.normal(size=(14, 3))
        idx = torch.tensor(knn(PointCloud(coords), 4).indices)
        edge = EdgeFeatureNet(3, seed=1).double()
        feats = torch.tensor(rng.normal(size=(14, 3)))
        fd_check(edge, lambda: projection_loss(edge(feats, idx)))

    def test_lift_then_edge_composition(self):
        rng = np.random.default_rng(3)
        coords_np = rng.normal(size=(10, 3))
        idx = torch.tensor(knn(PointCloud(coords_np), 3).indices)
        lift = PointLift(4, seed=2).double()
        edge = EdgeFeatureNet(4, seed=3).double()
        coords = torch.tensor(coords_np)
        stack = torch.nn.ModuleDict({"lift": lift, "edge": edge})
        fd_check(stack, lambda: projection_loss(edge(lift(coords), idx)))


def small_fusion(**kwargs) -> PromptFusion:
    defaults = dict(c1=2, c2=3, token_kernel=3, token_stride=2, seed=0)
    defaults.update(kwargs)
    return PromptFusion(**defaults).double()


class TestFusionGradients:
    def test_tokenize(self):
        fusion = small_fusion()
        maps = torch.randn(1, 2, 5, 5, generator=torch.Generator().manual_seed(4)).double()
        fd_check(
            fusion.tokenizer, lambda: projection_loss(fusion.tokenize(maps).tokens)
        )

    def test_attend(self):
        fusion = small_fusion()
        tokens = torch.randn(4, 3, generator=torch.Generator().manual_seed(5)).double()
        seq = TokenSequence(tokens, 2, 1)
        attn = torch.nn.ModuleDict(
            {"norm": fusion.norm, "q": fusion.to_q, "k": fusion.to_k, "v": fusion.to_v}
        )
        fd_check(attn, lambda: projection_loss(fusion.attend(seq).tokens))

    def test_detokenize_upsample(self):
        fusion = small_fusion()
        tokens = torch.randn(4, 3, generator=torch.Generator().manual_seed(6)).double()
        seq = TokenSequence(tokens, 2, 1)
        fd_check(
            fusion.upsample_conv,
            lambda: projection_loss(fusion.detokenize_upsample(seq, 5, 5)),
        )

    def test_conv_fuse(self):
        fusion = small_fusion()
        gen = torch.Generator().manual_seed(7)
        a = torch.randn(1, 2, 4, 4, generator=gen).double()
        b = torch.randn(1, 2, 4, 4, generator=gen).double()
        fd_check(fusion.fuse_conv, lambda: projection_loss(fusion.conv_fuse(a, b)))

    def test_generate_prompts_with_standardization(self):
        fusion = small_fusion()
        maps = torch.randn(1, 2, 4, 4, generator=torch.Generator().manual_seed(8)).double()
        fd_check(fusion.prompt_conv, lambda: projection_loss(fusion.generate_prompts(maps)))

    def test_full_pipeline_all_parameters(self):
        fusion = small_fusion()
        maps = torch.randn(2, 2, 6, 6, generator=torch.Generator().manual_seed(9)).double()
        fd_check(fusion, lambda: projection_loss(fusion(maps, "full")))


class TestHeadGradients:
    def test_head(self):
        head = ClassificationHead(2, 3, 3, seed=0).double()
        feats = torch.randn(2, 2, 3, 2, 2, generator=torch.Generator().manual_seed(10)).double()
        fd_check(head, lambda: projection_loss(head(feats)))


def tiny_network(mode="full") -> MultiViewPromptNetwork:
    torch.manual_seed(0)
    return MultiViewPromptNetwork(
        num_classes=3,
        n_views=2,
        mode=mode,
        backbone="tiny-cnn",
        c1=8,
        c2=8,
        k_neighbors=4,
        image_size=16,
        token_stride=4,
        seed=0,
    )


def tiny_batch(n=24, b=2, k=4):
    rng = np.random.default_rng(11)
    coords, idx = [], []
    for _ in range(b):
        c = rng.normal(size=(n, 3))
        c /= np.abs(c).max()
        coords.append(c)
        idx.append(knn(PointCloud(c), k).indices)
    return (
        torch.tensor(np.stack(coords), dtype=torch.float32),
        torch.tensor(np.stack(idx)),
    )


class TestNetworkGradientContracts:
    def test_frozen_zero_prompts_nonzero(self):
        net = tiny_network()
        net.train()
        coords, idx = tiny_batch()
        prompts = net.prompts(coords, idx)
        prompts.retain_grad()
        feats = net.backbone.extract(prompts, train_mode=True)
        loss = net.head(feats).square().sum()
        loss.backward()
        assert prompts.grad is not None
        assert torch.count_nonzero(prompts.grad) > 0
        for p in net.backbone.frozen_parameters():
            assert p.grad is None or torch.count_nonzero(p.grad) == 0
        assert all(
            p.grad is not None for p in net.fusion.parameters() if p.requires_grad
        )

    def test_baseline_mode_never_touches_fusion_params(self):
        net = tiny_network(mode="baseline")
        net.train()
        coords, idx = tiny_batch()
        loss = net(coords, idx).square().sum()
        loss.backward()
        untouched = [
            net.fusion.tokenizer,
            net.fusion.norm,
            net.fusion.to_q,
            net.fusion.to_k,
            net.fusion.to_v,
            net.fusion.upsample_conv,
            net.fusion.fuse_conv,
        ]
        for module in untouched:
            for p in module.parameters():
                assert p.grad is None or torch.count_nonzero(p.grad) == 0
        # the prompt projection itself does train under baseline
        assert any(
            p.grad is not None and torch.count_nonzero(p.grad) > 0
            for p in net.fusion.prompt_conv.parameters()
        )

    def test_attention_only_mode_never_touches_conv_fusion(self):
        net = tiny_network(mode="attention_only")
        net.train()
        coords, idx = tiny_batch()
        net(coords, idx).square().sum().backward()
        for p in net.fusion.fuse_conv.parameters():
            assert p.grad is None or torch.count_nonzero(p.grad) == 0
        assert any(
            p.grad is not None and torch.count_nonzero(p.grad) > 0
            for p in net.fusion.to_v.parameters()
        )
