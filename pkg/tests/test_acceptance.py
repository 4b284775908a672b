"""Acceptance suite: one test per exit criterion, tolerances pinned inline.

Run with `pytest tests/test_acceptance.py -v` for one pass/fail line per
criterion.  Criterion 4 is known-red: greedy agglomeration on a sentineled
matrix can strand more clusters than the per-class bound, so the literal
100%-of-cases claim is not achievable by the specified algorithm; see
test_c04 and the repository notes.
"""

import math
import time
from fractions import Fraction

import numpy as np
import pytest

import kpgroup.decode as decode_mod
from kpgroup.budget import (
    bytes_to_mib,
    head_channels,
    load_encoder_profiles,
    output_share_percent,
    output_tensor_bytes,
)
from kpgroup.cluster import agglomerate, average_weights, cut, make_grouping
from kpgroup.decode import decode_full, gaussian_mask, rescore_refine
from kpgroup.dissim import DissimilarityMatrix, apply_restrictions
from kpgroup.metrics import adjusted_rand_index
from kpgroup.schema import (
    ClassSpec,
    Grouping,
    KeypointSchema,
    check_grouping,
    min_restricted_clusters,
)
from kpgroup.synth import (
    Distractor,
    SceneSpec,
    evaluate,
    closest_peak_trap_case,
    random_scene,
    render,
)

from .helpers import (
    ari_fraction_oracle,
    brute_force_partitions,
    labels_from_partition,
    partition_to_labels,
    random_ambiguity_free_grouping,
    random_schema,
    random_symmetric_matrix,
    set_partitions,
)


def _report(criterion: str, detail: str = ""):
    print(f"[acceptance] {criterion}: PASS {detail}".rstrip())


# -----------------------------------------------------------------------
# 1. Channel accounting
# -----------------------------------------------------------------------


def test_c01_channel_accounting():
    """901 and 205 total channels, exact integers."""
    assert head_channels(13, 294, 294).total == 901
    assert head_channels(13, 62, 62).total == 205
    _report("c01 channel accounting", "901 / 205")


# -----------------------------------------------------------------------
# 2. Memory table
# -----------------------------------------------------------------------


def test_c02_memory_table():
    """Output-tensor MiB within 0.05; all nine share percentages within 0.1."""
    for resolution, expected_mib in ((128, 3.5), (256, 14.1), (512, 56.3)):
        got = bytes_to_mib(output_tensor_bytes(resolution, resolution, 901))
        assert abs(got - expected_mib) <= 0.05, (resolution, got)

    expected_percent = {
        ("DLA-34", 128): 3.8, ("DLA-34", 256): 9.8, ("DLA-34", 512): 16.1,
        ("ResNet-50", 128): 2.7, ("ResNet-50", 256): 7.7, ("ResNet-50", 512): 14.5,
        ("Hourglass", 128): 0.4, ("Hourglass", 256): 1.5, ("Hourglass", 512): 4.0,
    }
    profiles = {p.name: p for p in load_encoder_profiles()}
    for (name, resolution), expected in expected_percent.items():
        p = profiles[name]
        out_mib = bytes_to_mib(output_tensor_bytes(resolution, resolution, 901))
        share = output_share_percent(
            out_mib, p.weights_mib, p.activations_mib[resolution],
            resolution, resolution,
        )
        assert abs(share - expected) <= 0.1, (name, resolution, share)
    _report("c02 memory table", "3 sizes + 9 shares")


# -----------------------------------------------------------------------
# 3. Clustering oracle equivalence
# -----------------------------------------------------------------------


def test_c03_clustering_matches_brute_force():
    """1000 random matrices, n <= 12, both linkages, exact label match."""
    rng = np.random.default_rng(20240601)
    t0 = time.time()
    total = 0
    for trial in range(1000):
        n = int(rng.integers(2, 13))
        tie_prone = trial % 2 == 0  # half the runs use heavily duplicated values
        values = random_symmetric_matrix(rng, n, tie_prone)
        for linkage in ("average", "complete"):
            dendro = agglomerate(
                DissimilarityMatrix.from_values(values, "offsets"), linkage
            )
            reference = brute_force_partitions(values, linkage)
            for m in range(1, n + 1):
                expect = labels_from_partition(reference[m], n)
                np.testing.assert_array_equal(
                    cut(dendro, m), expect,
                    err_msg=f"trial={trial} n={n} linkage={linkage} m={m}",
                )
            total += 1
    _report("c03 clustering oracle", f"{total} runs in {time.time() - t0:.1f}s")


# -----------------------------------------------------------------------
# 4. Restriction property  (known-red: see module docstring)
# -----------------------------------------------------------------------


def test_c04_restriction_property():
    """Restricted clustering cut at the per-class bound, zero same-class merges.

    This criterion is NOT attainable by greedy agglomeration on a sentineled
    matrix: all conflict-free merges happen before any conflicted one, but a
    maximal sequence of conflict-free merges can strand more clusters than
    min_restricted_clusters (a conflict-free partition at the bound always
    exists, yet reaching it can require undoing merges).  scipy's linkage
    strands at the same rate, so this is inherent to the specified
    algorithm, not an implementation artifact.  The production path guards
    against silent violations via cluster.cut_restricted.
    """
    rng = np.random.default_rng(20240604)
    violations = []
    for trial in range(200):
        schema = random_schema(rng, max_classes=6, max_kps=8)
        if schema.n < 2:
            continue
        values = random_symmetric_matrix(rng, schema.n, bool(rng.integers(2)))
        restricted = apply_restrictions(
            DissimilarityMatrix.from_values(values, "offsets"), schema
        )
        dendro = agglomerate(restricted, "average")
        bound = min_restricted_clusters(schema)
        for m in {bound, int(rng.integers(bound, schema.n + 1))}:
            labels = cut(dendro, m)
            grouping = make_grouping(schema, labels, labels)
            report = check_grouping(schema, grouping, mode="restricted")
            if not report.restricted_ok:
                violations.append((trial, schema.n, bound, m))

    assert not violations, (
        f"{len(violations)}/200 instances produced same-class merges at "
        f"m >= min_restricted_clusters (first few: {violations[:5]}); "
        "greedy agglomeration cannot guarantee the bound -- see "
        "tests/test_acceptance.py docstring and notes/decisions.md"
    )
    _report("c04 restriction property")


# -----------------------------------------------------------------------
# 5. ARI correctness
# -----------------------------------------------------------------------


def test_c05_ari_exhaustive():
    """All 52x52 partition pairs of 5 elements vs the exact closed form."""
    parts = list(set_partitions(list(range(5))))
    assert len(parts) == 52  # Bell(5)
    labelings = [partition_to_labels(p, 5) for p in parts]
    worst = 0.0
    for la in labelings:
        for lb in labelings:
            ours = adjusted_rand_index(la, lb)
            oracle = float(ari_fraction_oracle(la, lb))
            worst = max(worst, abs(ours - oracle))
    assert worst <= 1e-12
    assert adjusted_rand_index([0, 1, 0, 1, 2], [0, 1, 0, 1, 2]) == 1.0
    assert adjusted_rand_index([0, 0, 1, 1], [1, 1, 0, 0]) == 1.0
    assert adjusted_rand_index([0, 0, 1, 1], [0, 1, 0, 1]) == -0.5
    _report("c05 ARI", f"52x52 exhaustive, max err {worst:.1e}")


# -----------------------------------------------------------------------
# 6. Decode roundtrip
# -----------------------------------------------------------------------


def _random_small_schema(rng):
    n_classes = int(rng.integers(1, 4))
    return KeypointSchema(
        tuple(
            ClassSpec(cid, f"c{cid}", int(rng.integers(1, 4)))
            for cid in range(n_classes)
        )
    )


def test_c06_decode_roundtrip():
    """100 well-separated scenes: exact recovery within 0.5 px."""
    rng = np.random.default_rng(20240606)
    n_scenes = 100
    for scene_idx in range(n_scenes):
        schema = _random_small_schema(rng)
        identity = Grouping.identity(schema)
        spec = random_scene(schema, identity, rng)
        heads, truth = render(spec, schema, identity)

        for refine in ("base", "rescore"):
            dets = decode_full(heads, schema, identity, refine=refine, sigma=4.0)
            assert len(dets) == len(truth), (scene_idx, refine)
            _assert_recovered(dets, truth, tol=0.5, ctx=(scene_idx, refine))

        grouping = random_ambiguity_free_grouping(schema, rng)
        spec = random_scene(schema, grouping, rng)
        heads, truth = render(spec, schema, grouping)
        dets = decode_full(heads, schema, grouping, refine="rescore", sigma=4.0)
        assert len(dets) == len(truth), scene_idx
        _assert_recovered(dets, truth, tol=0.5, ctx=(scene_idx, "grouped"))
    _report("c06 decode roundtrip", f"{n_scenes} scenes x 3 decodes")


def _assert_recovered(dets, truth, tol, ctx):
    used = set()
    for gt in truth:
        match = None
        for di, d in enumerate(dets):
            if di in used or d.class_id != gt.class_id:
                continue
            if all(abs(a - b) <= tol for a, b in zip(d.box, gt.box)):
                match = di
                break
        assert match is not None, f"{ctx}: object unmatched (box off by > {tol}px)"
        used.add(match)
        det = dets[match]
        for kp, (tx, ty) in zip(det.keypoints, gt.keypoints):
            err = math.dist((kp.x, kp.y), (tx, ty))
            assert err <= tol, f"{ctx}: keypoint off by {err:.3f}px"


# -----------------------------------------------------------------------
# 7. Closest-peak pathology
# -----------------------------------------------------------------------


def test_c07_closest_peak_pathology():
    """Base picks the distractor, rescoring the true peak; break-even +-1%."""
    case = closest_peak_trap_case()
    exp = case.expected
    heads, _ = render(case.spec, case.schema, case.grouping)

    base = decode_full(heads, case.schema, case.grouping,
                       refine="base", sigma=exp["sigma"])
    kp = base[0].keypoints[exp["keypoint_index"]]
    assert (kp.x, kp.y) == exp["base_picks"]

    rescored = decode_full(heads, case.schema, case.grouping,
                           refine="rescore", sigma=exp["sigma"])
    kp = rescored[0].keypoints[exp["keypoint_index"]]
    assert (kp.x, kp.y) == exp["rescore_picks"]

    # hand-derived break-even: a* = 0.9 * exp((d_near^2 - d_far^2)/(2 sigma^2))
    assert exp["break_even_amplitude"] == pytest.approx(
        0.9 * math.exp(-0.375), rel=1e-12
    )
    for scale, expect in ((0.99, exp["rescore_picks"]), (1.01, exp["base_picks"])):
        d = case.spec.distractors[0]
        spec = SceneSpec(
            case.spec.height, case.spec.width,
            case.spec.sigma_center, case.spec.sigma_keypoint,
            case.spec.objects,
            (Distractor(d.channel, d.position,
                        scale * exp["break_even_amplitude"], d.sigma),),
        )
        heads, _ = render(spec, case.schema, case.grouping)
        dets = decode_full(heads, case.schema, case.grouping,
                           refine="rescore", sigma=exp["sigma"])
        kp = dets[0].keypoints[exp["keypoint_index"]]
        assert (kp.x, kp.y) == expect, f"flip failed at {scale} * break-even"
    _report("c07 closest-peak pathology")


# -----------------------------------------------------------------------
# 8. Rescoring invariants
# -----------------------------------------------------------------------


@pytest.fixture
def invariant_checked_rescore(monkeypatch):
    """Wrap rescore_refine so every call checks mask/product invariants."""
    original = decode_mod.rescore_refine
    calls = {"n": 0}

    def checked(channel, coarse, sigma, kp_offset=None):
        channel = np.asarray(channel, dtype=np.float64)
        h, w = channel.shape
        cx = min(max(float(coarse[0]), 0.0), w - 1.0)
        cy = min(max(float(coarse[1]), 0.0), h - 1.0)
        mask = gaussian_mask((cx, cy), sigma, h, w)
        product = channel * mask.values
        assert (product <= channel).all(), "rescored map exceeds the original"
        ys, xs = np.mgrid[0:h, 0:w]
        dist = np.hypot(xs - cx, ys - cy)
        outside = dist > 3.0 * sigma
        outside[int(math.floor(cy + 0.5)), int(math.floor(cx + 0.5))] = False
        assert (product[outside] == 0).all(), "support leaks beyond 3 sigma"
        calls["n"] += 1
        return original(channel, coarse, sigma, kp_offset)

    monkeypatch.setattr(decode_mod, "rescore_refine", checked)
    return calls


def test_c08_rescoring_invariants(invariant_checked_rescore):
    """Invariants on every rescoring call plus both sigma limit behaviors."""
    rng = np.random.default_rng(20240608)

    # exercise decode_full so in-pipeline calls are also checked
    for _ in range(10):
        schema = _random_small_schema(rng)
        grouping = random_ambiguity_free_grouping(schema, rng)
        spec = random_scene(schema, grouping, rng)
        heads, truth = render(spec, schema, grouping)
        dets = decode_full(heads, schema, grouping, refine="rescore", sigma=4.0)
        assert evaluate(dets, truth, schema).accuracy == 1.0

    # direct random calls with a wide sigma range
    for _ in range(320):
        h, w = int(rng.integers(6, 30)), int(rng.integers(6, 30))
        channel = rng.uniform(0, 1, (h, w))
        coarse = (float(rng.uniform(-2, w + 1)), float(rng.uniform(-2, h + 1)))
        sigma = float(10 ** rng.uniform(-3.2, 2.5))
        decode_mod.rescore_refine(channel, coarse, sigma)

    # sigma -> 0: returns the pixel nearest the coarse position
    channel = np.full((12, 16), 0.3)
    channel[7, 4] = 0.9
    kp = decode_mod.rescore_refine(channel, (4.4, 6.7), 1e-3)
    assert (kp.x, kp.y) == (4.0, 7.0)
    assert kp.score == channel[7, 4]

    # sigma >= grid diagonal: argmax converges to the global max
    channel = np.zeros((16, 16))
    channel[2, 2] = 0.5
    channel[14, 15] = 0.9
    diag = math.hypot(16, 16)
    for sigma in (diag, 10 * diag):
        kp = decode_mod.rescore_refine(channel, (2.0, 2.0), sigma)
        assert (kp.x, kp.y) == (15.0, 14.0)

    assert invariant_checked_rescore["n"] > 300
    _report("c08 rescoring invariants",
            f"{invariant_checked_rescore['n']} checked calls")


# -----------------------------------------------------------------------
# 9. Weight averaging
# -----------------------------------------------------------------------


def test_c09_weight_averaging():
    """Hand-computed means, dx/dy separation, expand-and-reaverage fixpoint."""
    w = np.array([[2.0, 4.0], [4.0, 8.0], [10.0, 20.0]])
    _, rows = average_weights(w, [0, 0, 1], "heat")
    np.testing.assert_array_equal(rows, [[3.0, 6.0], [10.0, 20.0]])

    # reg head: keypoints 0,1 merged; dx rows [1],[3]; dy rows [10],[30]
    wr = np.array([[1.0], [10.0], [3.0], [30.0], [7.0], [70.0]])
    init, rows = average_weights(wr, [0, 0, 1], "reg")
    np.testing.assert_array_equal(rows, [[2.0], [20.0], [7.0], [70.0]])
    assert init.members == ((0, 1), (2,))

    rng = np.random.default_rng(20240609)
    for head in ("heat", "reg"):
        n = 8
        labels = rng.integers(0, 3, n)
        labels = labels - labels.min()
        from kpgroup.cluster import canonical_labels

        labels = canonical_labels(labels.tolist())
        rows_per_kp = 2 if head == "reg" else 1
        w = rng.normal(size=(rows_per_kp * n, 5))
        _, grouped = average_weights(w, labels, head)
        if head == "heat":
            expanded = grouped[labels]
        else:
            idx = np.empty(2 * n, dtype=np.int64)
            idx[0::2] = 2 * labels
            idx[1::2] = 2 * labels + 1
            expanded = grouped[idx]
        _, regrouped = average_weights(expanded, labels, head)
        np.testing.assert_array_equal(grouped, regrouped)
    _report("c09 weight averaging")


# -----------------------------------------------------------------------
# 10. Desk-scale exclusions (documentation criterion)
# -----------------------------------------------------------------------


def test_c10_desk_scale_exclusions():
    """Trained-network results are out of scope by design.

    Not reproduced here because they depend on trained weights, datasets,
    and hardware: mAP/AP accuracy figures, dataset-specific inconsistent
    pair counts, the minimal published cluster pair, accuracy-vs-cluster
    curves, and latency/GPU-memory measurements.  Criteria 3-9 substitute
    property suites and synthetic oracles for them.
    """
    import pathlib

    readme = pathlib.Path(__file__).resolve().parents[1] / "README.md"
    text = readme.read_text()
    assert "not reproduced" in text.lower()
    _report("c10 desk-scale exclusions", "documented in README")
