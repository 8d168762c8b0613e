import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from deformdet.config import ConfigError, NeckConfig
from deformdet.neck import Neck, manifest_graph, plan_nodes, reaches
from deformdet.nn import ParamStore
from deformdet.tensor import finite_diff_grad, grad_error

CH = {2: 3, 3: 4, 4: 5, 5: 6}


def pyramid(rng, levels, side=16, batch=1):
    return {i: rng.normal(size=(batch, CH[i], side >> (i - levels[0]), side >> (i - levels[0])))
            for i in levels}


def build(kind="dfpn", levels=(3, 4, 5), oc=4, seed=0, **kw):
    store = ParamStore(seed)
    return Neck(NeckConfig(kind=kind, levels=levels, out_channels=oc, **kw), CH, store), store


def zero_biases(store):
    for p in store.params.values():
        if p.role.endswith("bias"):
            p.value[...] = 0.0


@pytest.mark.parametrize("kind", ["dfpn", "pafpn"])
@pytest.mark.parametrize("levels", [(3, 4, 5), (4, 5), (2, 3, 4, 5)])
def test_output_shapes(kind, levels):
    neck, _ = build(kind, levels)
    C = pyramid(np.random.default_rng(0), levels, side=32)
    out = neck.forward(C)
    for i in levels:
        assert out.P[i].shape == (1, 4) + C[i].shape[2:]
        assert out.N[i].shape == (1, 4) + C[i].shape[2:]


def test_top_level_is_lateral_conv():
    neck, store = build(levels=(4, 5))
    C = pyramid(np.random.default_rng(1), (4, 5))
    out = neck.forward(C)
    w, b = store["neck.lateral5.weight"][:, :, 0, 0], store["neck.lateral5.bias"]
    expected = np.einsum("oc,bchw->bohw", w, C[5]) + b[None, :, None, None]
    np.testing.assert_allclose(out.P[5], expected, atol=1e-12)


def test_two_level_identity_laterals_by_hand():
    store = ParamStore(0)
    chans = {4: 1, 5: 1}
    neck = Neck(NeckConfig(kind="dfpn", levels=(4, 5), out_channels=1), chans, store)
    for lvl in (4, 5):
        store[f"neck.lateral{lvl}.weight"][...] = 1.0
        store[f"neck.lateral{lvl}.bias"][...] = 0.0
    c4 = np.arange(16.0).reshape(1, 1, 4, 4)
    c5 = np.array([[[[100.0, 200.0], [300.0, 400.0]]]])
    out = neck.forward({4: c4, 5: c5})
    expected = np.array([[100, 101, 202, 203],
                         [104, 105, 206, 207],
                         [308, 309, 410, 411],
                         [312, 313, 414, 415]], dtype=float)
    np.testing.assert_array_equal(out.P[4][0, 0], expected)


def test_literal_topdown_adds_upsampled_lateral():
    store = ParamStore(0)
    chans = {3: 1, 4: 1, 5: 1}
    neck = Neck(NeckConfig(levels=(3, 4, 5), out_channels=1, literal_topdown=True), chans, store)
    for lvl in (3, 4, 5):
        store[f"neck.lateral{lvl}.weight"][...] = 1.0
        store[f"neck.lateral{lvl}.bias"][...] = 0.0
    C = {3: np.zeros((1, 1, 4, 4)), 4: np.zeros((1, 1, 2, 2)), 5: np.full((1, 1, 1, 1), 7.0)}
    out = neck.forward(C)
    # with the literal reading, P3 sees only L4 (zero), not the P4 that carries C5
    assert not out.P[3].any()
    assert np.all(out.P[4] == 7.0)


@pytest.mark.parametrize("kind", ["dfpn", "pafpn"])
def test_zero_input_zero_bias_gives_zero(kind):
    neck, store = build(kind)
    zero_biases(store)
    C = {i: np.zeros_like(v) for i, v in pyramid(np.random.default_rng(0), (3, 4, 5)).items()}
    out = neck.forward(C)
    for i in (3, 4, 5):
        assert not out.P[i].any() and not out.N[i].any()


def fuse_in_channels(store, level):
    return store[f"neck.fuse{level}.weight"].shape[1]


def test_two_level_dfpn_fuse_width():
    _, store = build("dfpn", (4, 5), oc=8)
    assert fuse_in_channels(store, 5) == 8 * 3


def test_three_level_dfpn_fuse_width():
    _, store = build("dfpn", (3, 4, 5), oc=8)
    assert fuse_in_channels(store, 4) == 8 * 3
    assert fuse_in_channels(store, 5) == 8 * 4


@settings(max_examples=20, deadline=None)
@given(st.sampled_from([(2, 3), (3, 4), (4, 5), (2, 3, 4), (3, 4, 5), (2, 3, 4, 5)]),
       st.integers(1, 16))
def test_fuse_width_formula(levels, oc):
    _, store = build("dfpn", levels, oc=oc)
    for k, lvl in enumerate(levels[1:], start=1):
        assert fuse_in_channels(store, lvl) == oc * (2 + k)
    _, store = build("pafpn", levels, oc=oc)
    for lvl in levels[1:]:
        assert fuse_in_channels(store, lvl) == 2 * oc


def test_two_level_manifests_differ_only_in_dense_input():
    _, d_store = build("dfpn", (4, 5), oc=8)
    _, p_store = build("pafpn", (4, 5), oc=8)
    diff = set(d_store.manifest()) ^ set(p_store.manifest())
    assert diff == {"neck.fuse5.weight 8x24x3x3 conv neck", "neck.fuse5.weight 8x16x3x3 conv neck"}


def _collapse_identities(lines):
    """Graph of parameterised nodes, with identity nodes replaced by their source."""
    graph = manifest_graph(lines)
    alias = {}
    for line in lines:
        out, _, srcs, op, _ = line.split()
        if op == "identity":
            alias[out] = srcs
    def resolve(n):
        while n in alias:
            n = alias[n]
        return n
    return {resolve(k): {resolve(s) for s in v} for k, v in graph.items() if k not in alias}


def test_severed_dfpn_matches_pafpn_graph():
    cfg = NeckConfig(kind="dfpn", levels=(4, 5), out_channels=4)
    severed = [n.line() for n in plan_nodes(cfg, CH, dense=False)]
    pafpn = [n.line() for n in plan_nodes(NeckConfig(kind="pafpn", levels=(4, 5), out_channels=4),
                                          CH)]
    assert _collapse_identities(severed) == _collapse_identities(pafpn)


@pytest.mark.parametrize("levels", [(3, 4, 5), (2, 3, 4, 5)])
def test_dense_reachability(levels):
    neck, _ = build("dfpn", levels)
    graph = manifest_graph(neck.manifest())
    for i in levels:
        for j in levels:
            if j < i:
                assert f"N{j}" in graph[f"N{i}"]
                assert reaches(graph, f"N{j}", f"N{i}")


@pytest.mark.parametrize("levels", [(3, 4, 5), (2, 3, 4, 5)])
def test_pafpn_feeds_only_previous_level(levels):
    neck, _ = build("pafpn", levels)
    graph = manifest_graph(neck.manifest())
    for i in levels[1:]:
        earlier = {f"N{j}" for j in levels if j < i}
        assert graph[f"N{i}"] & earlier == {f"N{i - 1}"}


def test_manifest_line_format():
    neck, _ = build("dfpn", (3, 4, 5), oc=64)
    assert neck.manifest()[-1] == "N5 neck.fuse5 down1(P4),P5,down2(N3),down1(N4) concat+conv3x3 256->64"


@pytest.mark.parametrize("kind", ["dfpn", "pafpn"])
def test_gradient_reaches_every_level(kind):
    rng = np.random.default_rng(5)
    neck, store = build(kind, (3, 4, 5), oc=3, seed=2)
    for p in store.params.values():
        if p.role.endswith("bias"):
            p.value[...] = rng.normal(0, 0.1, p.value.shape)
    C = pyramid(rng, (3, 4, 5), side=32)
    top = neck.forward(C).N[5]
    dC = neck.backward({5: np.ones_like(top)})
    for i in (3, 4, 5):
        assert np.abs(dC[i]).sum() > 0
        idx = rng.choice(C[i].size, 6, replace=False)
        numeric = finite_diff_grad(lambda _: float(neck.forward(C).N[5].sum()), C[i], indices=idx)
        assert grad_error(dC[i].reshape(-1)[idx], numeric.reshape(-1)[idx]) < 1e-4


def test_levels_validated():
    with pytest.raises(ConfigError):
        NeckConfig(levels=(5,))
    with pytest.raises(ConfigError):
        NeckConfig(levels=(3, 5))
    with pytest.raises(ConfigError):
        NeckConfig(kind="bifpn")
