import json
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from geoshare.aligner import (
    AlignConfig,
    align_layer,
    candidate_delta,
    compute_bundles,
    geo_share,
    select_basis,
    truncate_bundle,
)
from geoshare.curvature import decompose, minor_axes, quadratic_cost
from geoshare.errors import ParameterError
from geoshare.linalg import SymmetricOperator
from geoshare.oracles import exhaustive_coloring, perp_energy
from geoshare.sharing import SharedBasis, color_classes, fit_coefficient, reconstruct

from reference import random_orthonormal, singular_values_via_gram


def spd(rng, n):
    a = rng.standard_normal((n, n))
    return a @ a.T / n + 0.05 * np.eye(n)


class MatrixSource:
    """Fixed dense Hessians per layer, standing in for a model."""

    def __init__(self, hs):
        self.hs = hs

    def __call__(self, layer):
        return SymmetricOperator.from_matrix(self.hs[layer])


def instance(seed, n_layers=4, k=2, m=4, n=3, r=1):
    rng = np.random.default_rng(seed)
    ws = [rng.standard_normal((m, n)) for _ in range(n_layers)]
    bases = [SharedBasis(b, random_orthonormal(rng, m, r), random_orthonormal(rng, n, r)) for b in range(k)]
    src = MatrixSource([spd(rng, m * n) for _ in range(n_layers)])
    return ws, bases, src


def bundle_for(h, t, layer=0):
    return minor_axes(SymmetricOperator.from_matrix(h), t, layer=layer, method="dense")


# -- candidate_delta -------------------------------------------------------------------


def test_representable_weight_has_zero_delta():
    rng = np.random.default_rng(0)
    b = SharedBasis(0, random_orthonormal(rng, 5, 2), random_orthonormal(rng, 4, 2))
    w = reconstruct(b, rng.standard_normal((2, 2)))
    _, delta = candidate_delta(w, b)
    assert np.linalg.norm(delta) < 1e-14


def test_own_svd_basis_delta_is_truncation_error():
    w = np.random.default_rng(1).standard_normal((6, 5))
    u, _, vt = np.linalg.svd(w)
    _, delta = candidate_delta(w, SharedBasis(0, u[:, :2], vt[:2].T))
    sigma = singular_values_via_gram(w)
    assert np.linalg.norm(delta) == pytest.approx(np.sqrt(np.sum(sigma[2:] ** 2)), abs=1e-10)


def test_zero_weight_has_zero_delta():
    b = SharedBasis(0, np.eye(3)[:, :1], np.eye(2)[:, :1])
    s, delta = candidate_delta(np.zeros((3, 2)), b)
    assert np.array_equal(s, np.zeros((1, 1))) and np.array_equal(delta, np.zeros(6))


def test_candidate_shape_mismatch():
    with pytest.raises(ParameterError):
        candidate_delta(np.ones((2, 2)), SharedBasis(0, np.eye(3)[:, :1], np.eye(2)[:, :1]))


# -- select_basis ------------------------------------------------------------------------


def test_single_candidate_is_chosen():
    ws, bases, src = instance(2, k=1)
    best, energies = select_basis(ws[0], bases, bundle_for(src.hs[0], 3))
    assert best == 0 and list(energies) == [0]


def test_exact_candidate_wins_with_zero_energy():
    rng = np.random.default_rng(3)
    _, bases, src = instance(3, k=3)
    w = reconstruct(bases[2], rng.standard_normal((1, 1)))
    best, energies = select_basis(w, bases, bundle_for(src.hs[0], 4))
    assert best == 2 and energies[2] < 1e-28


def test_energies_match_projector_oracle():
    ws, bases, src = instance(4, k=3)
    bundle = bundle_for(src.hs[0], 5)
    best, energies = select_basis(ws[0], bases, bundle)
    for b in bases:
        delta = (b.U @ b.U.T @ ws[0] @ b.V @ b.V.T - ws[0]).ravel()
        assert energies[b.basis_id] == pytest.approx(perp_energy(delta, bundle.vectors), abs=1e-12)
    assert energies[best] == min(energies.values())


def test_ties_go_to_lowest_id():
    u, v = np.eye(3)[:, :1], np.eye(2)[:, :1]
    bases = [SharedBasis(5, u, v), SharedBasis(2, u, v), SharedBasis(9, u, v)]
    best, _ = select_basis(np.ones((3, 2)), bases, bundle_for(np.eye(6), 2))
    assert best == 2


def test_select_needs_candidates():
    ws, _, src = instance(5)
    with pytest.raises(ParameterError):
        select_basis(ws[0], [], bundle_for(src.hs[0], 2))


# -- align_layer -------------------------------------------------------------------------


def test_zero_delta_keeps_weight_in_both_modes():
    rng = np.random.default_rng(6)
    b = SharedBasis(0, random_orthonormal(rng, 4, 2), random_orthonormal(rng, 3, 2))
    w = reconstruct(b, rng.standard_normal((2, 2)))
    bundle = bundle_for(spd(rng, 12), 3)
    for mode in ("paper-literal", "strict-sharing"):
        assert np.allclose(align_layer(w, b, bundle, 0.05, mode).aligned_weight, w, atol=1e-14)


def test_unclipped_limit_removes_only_high_curvature_part():
    ws, bases, src = instance(7)
    bundle = bundle_for(src.hs[0], 4)
    res = align_layer(ws[0], bases[0], bundle, 1e12)
    split = decompose(candidate_delta(ws[0], bases[0])[1], bundle)
    assert np.allclose(res.aligned_weight, ws[0] + split.delta_par.reshape(ws[0].shape), atol=1e-14)
    assert not res.pre_clip_exceeds_tau


def test_zero_trust_region_keeps_weight():
    ws, bases, src = instance(8)
    res = align_layer(ws[0], bases[0], bundle_for(src.hs[0], 4), 0.0)
    assert np.array_equal(res.aligned_weight, ws[0])
    assert res.tau == 0.0


def test_strict_mode_stores_only_shared_factors():
    ws, bases, src = instance(9)
    res = align_layer(ws[0], bases[1], bundle_for(src.hs[0], 4), 0.05, "strict-sharing")
    assert np.allclose(res.aligned_weight, reconstruct(bases[1], fit_coefficient(ws[0], bases[1])))
    assert np.allclose(res.realized_delta, res.delta_star)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(1e-4, 10.0))
def test_alignment_contracts(seed, beta):
    ws, bases, src = instance(seed % 10_000)
    t = int(np.random.default_rng(seed).integers(1, 12))
    bundle = bundle_for(src.hs[0], t)
    res = align_layer(ws[0], bases[0], bundle, beta)
    clipped = res.delta_par_clipped
    assert np.linalg.norm(clipped) <= beta * np.linalg.norm(ws[0]) + 1e-12
    assert np.max(np.abs(bundle.vectors.T @ clipped)) <= 1e-10 * max(np.linalg.norm(clipped), 1e-300)
    op = src(0)
    assert quadratic_cost(clipped, op) <= quadratic_cost(res.delta_star, op) + 1e-12


# -- geo_share -----------------------------------------------------------------------------


def test_single_basis_gives_full_symmetry():
    ws, bases, src = instance(10, k=1)
    coloring, _, _ = geo_share(ws, bases, AlignConfig(t=3), src)
    assert coloring.assignment == (0, 0, 0, 0)
    assert color_classes(coloring).describe() == "S4"


@pytest.mark.parametrize("seed", range(20))
def test_greedy_equals_exhaustive(seed):
    k = 2 + seed % 2
    ws, bases, src = instance(100 + seed, k=k)
    coloring, _, report = geo_share(ws, bases, AlignConfig(t=4), src)
    energies = [{int(b): e for b, e in rec["energies"].items()} for rec in report.layers]
    best, total = exhaustive_coloring(energies)
    assert report.total_perp_energy == total
    assert coloring.assignment == best


def test_planted_clusters_are_recovered():
    rng = np.random.default_rng(11)
    factors = [(random_orthonormal(rng, 5, 2), random_orthonormal(rng, 5, 2)) for _ in range(2)]
    bases = [SharedBasis(b, *factors[b]) for b in range(2)]
    planted = (1, 0, 0, 1, 0)
    ws = [factors[c][0] @ rng.standard_normal((2, 2)) @ factors[c][1].T + 1e-3 * rng.standard_normal((5, 5)) for c in planted]
    src = MatrixSource([spd(rng, 25) for _ in ws])
    coloring, _, _ = geo_share(ws, bases, AlignConfig(t=6), src)
    assert coloring.assignment == planted


def test_report_fields_and_json():
    ws, bases, src = instance(12)
    coloring, aligned, report = geo_share(ws, bases, AlignConfig(t=3, mode="strict-sharing"), src, loss_fn=lambda w: float(sum(np.sum(x * x) for x in w)))
    d = json.loads(report.to_json())
    assert d["coloring"] == list(coloring.assignment)
    assert 0 < d["compression_ratio"] < 1
    assert d["loss_before"] != d["loss_after"]
    rec = d["layers"][0]
    for key in ("layer", "chosen_basis", "energies", "tau", "norm_delta_star", "norm_delta_par",
                "norm_delta_par_clipped", "surrogate_cost_before", "surrogate_cost_after", "t_effective"):
        assert key in rec
    assert AlignConfig.from_dict(d["config"]) == AlignConfig(t=3, mode="strict-sharing")


def test_paper_literal_has_no_compression_ratio():
    ws, bases, src = instance(13)
    _, _, report = geo_share(ws, bases, AlignConfig(t=3, mode="paper-literal"), src)
    assert report.compression_ratio is None


def test_fixed_coloring_overrides_selection():
    ws, bases, src = instance(14)
    from geoshare.sharing import Coloring

    fixed = Coloring((1, 1, 0, 1))
    coloring, _, report = geo_share(ws, bases, AlignConfig(t=3), src, fixed_coloring=fixed)
    assert coloring.assignment == fixed.assignment
    with pytest.raises(ParameterError):
        geo_share(ws, bases, AlignConfig(t=3), src, fixed_coloring=Coloring((0, 1)))


def test_geo_share_is_deterministic():
    ws, bases, src = instance(15)
    a = geo_share(ws, bases, AlignConfig(t=5), src)
    b = geo_share(ws, bases, AlignConfig(t=5), src)
    assert a[0] == b[0]
    assert all(np.array_equal(x, y) for x, y in zip(a[1], b[1]))
    assert a[2].to_json() == b[2].to_json()


def test_t_is_capped_below_dimension():
    ws, bases, src = instance(16)
    bundles = compute_bundles(ws, AlignConfig(t=550), src)
    assert all(b.t == 11 and b.requested_t == 11 for b in bundles)
    assert truncate_bundle(bundles[0], 3).t == 3
    with pytest.raises(ParameterError):
        truncate_bundle(bundles[0], 12)


def test_geo_share_input_checks():
    ws, bases, src = instance(17)
    with pytest.raises(ParameterError):
        geo_share(ws, bases, AlignConfig(t=3))
    with pytest.raises(ParameterError):
        geo_share(ws, bases + [bases[0]], AlignConfig(t=3), src)
    with pytest.raises(ParameterError):
        geo_share([np.ones((2, 2))], bases, AlignConfig(t=3), MatrixSource([np.eye(4)]))


@pytest.mark.parametrize(
    "kwargs",
    [{"t": 0}, {"beta": 0.0}, {"mode": "loose"}, {"tie_break": "random"}, {"which": "smallest"}, {"policy": "lenient"}],
)
def test_align_config_validation(kwargs):
    with pytest.raises(ParameterError):
        AlignConfig(**kwargs)


def test_config_round_trip():
    cfg = replace(AlignConfig(), t=7, beta=0.2, diagonal=True)
    assert AlignConfig.from_dict(cfg.to_dict()) == cfg
