"""End-to-end grouping analysis on synthesized convolution weights.

Builds a multi-class schema whose keypoint types fall into latent semantic
slots shared across classes (collar-like, sleeve-like, ...), synthesizes
last-layer weights for two training runs as slot vectors plus noise, then:

  1. clusters both runs' heatmap weights and prints the consensus curve
     (agreement between the two runs' groupings per cluster count),
  2. prints the ambiguous-decoding matrix for one run's reg/heat dendrogram
     pair with its zero frontier,
  3. prints the channel/memory budget of a frontier grouping.

Deterministic: fixed seeds, byte-stable output.
"""

import numpy as np

from kpgroup.budget import budget_report
from kpgroup.cluster import agglomerate, cut, make_grouping
from kpgroup.dissim import conv_weight_distance
from kpgroup.metrics import ambiguity_matrix, consensus_curve
from kpgroup.schema import ClassSpec, KeypointSchema, check_grouping

FEATURES = 32
NOISE = 0.25


def build_schema():
    counts = [6, 5, 4, 5, 4]
    return KeypointSchema(
        tuple(ClassSpec(i, f"class{i}", c) for i, c in enumerate(counts))
    )


def latent_slots(schema, rng):
    """Assign each keypoint type a latent slot; similar types share slots."""
    n_slots = 8
    slots = []
    for c, rng_ in schema.class_ranges():
        for local in range(c.kp_count):
            slots.append((local * n_slots // c.kp_count) % n_slots)
    basis = rng.normal(size=(n_slots, FEATURES))
    return np.array(slots), basis


def synth_weights(schema, slots, basis, rng, head):
    rows_per_kp = 2 if head == "reg" else 1
    rows = []
    for s in slots:
        for _ in range(rows_per_kp):
            rows.append(basis[s] + NOISE * rng.normal(size=FEATURES))
    return np.asarray(rows)


def main():
    schema = build_schema()
    n = schema.n
    print(f"schema: {len(schema.classes)} classes, n={n} keypoint types\n")

    slot_rng = np.random.default_rng(100)
    slots, basis = latent_slots(schema, slot_rng)

    # two independent "checkpoints" = two noise draws over the same latents
    run_a = np.random.default_rng(1)
    run_b = np.random.default_rng(2)
    heat_a = synth_weights(schema, slots, basis, run_a, "heat")
    heat_b = synth_weights(schema, slots, basis, run_b, "heat")
    reg_a = synth_weights(schema, slots, basis, run_a, "reg")

    dendro_heat_a = agglomerate(conv_weight_distance(heat_a, "heat", schema))
    dendro_heat_b = agglomerate(conv_weight_distance(heat_b, "heat", schema))
    dendro_reg_a = agglomerate(conv_weight_distance(reg_a, "reg", schema))

    counts = [4, 6, 8, 10, 14, 18, 22, n]
    print("consensus between the two runs (heatmap head):")
    print(f"{'clusters':>10}{'ARI':>10}")
    for m, ari in consensus_curve(dendro_heat_a, dendro_heat_b, counts):
        print(f"{m:>10}{ari:>10.3f}")

    print("\nambiguous-decoding matrix (run A, reg x heat cuts):")
    am = ambiguity_matrix(schema, dendro_reg_a, dendro_heat_a, counts, counts)
    print(am.to_text())
    print(f"zero frontier: {list(am.zero_frontier)}")

    m_reg, m_heat = am.zero_frontier[0]
    grouping = make_grouping(
        schema, cut(dendro_reg_a, m_reg), cut(dendro_heat_a, m_heat)
    )
    report = check_grouping(schema, grouping, mode="unrestricted")
    print(f"\nchosen grouping ({m_reg},{m_heat}): "
          f"ambiguous={report.ambiguous_pairs_total} "
          f"inconsistent reg/heat={report.inconsistent_reg}/{report.inconsistent_heat}")
    print("\nbudget at 256x256 input:")
    print(budget_report(len(schema.classes), m_reg, m_heat, 256))


if __name__ == "__main__":
    main()
