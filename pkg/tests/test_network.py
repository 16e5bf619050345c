import numpy as np
import pytest

from designest.designs import BernoulliDesign, CompletelyRandomizedDesign
from designest.moments import exact_moments, mc_moments
from designest.network import (
    ExposureRules,
    InterferenceGraph,
    derive_exposure_design,
    exposure_map,
    positivity_report,
    standard_binary_exposure_rules,
)


def path_graph(n):
    edges = [(i, i + 1) for i in range(n - 1)] + [(i + 1, i) for i in range(n - 1)]
    return InterferenceGraph(n, edges)


class TestGraph:
    def test_cleaning_drops_self_loops_and_duplicates(self):
        g = InterferenceGraph(3, [(0, 1), (0, 1), (1, 1), (2, 0)])
        assert len(g.edges) == 2

    def test_out_neighbor_default_vs_undirected(self):
        g = InterferenceGraph(3, [(0, 1)])
        assert g.degrees().tolist() == [1, 0, 0]
        assert g.degrees(undirected=True).tolist() == [1, 1, 0]

    def test_csv_roundtrip(self, tmp_path):
        path = tmp_path / "edges.csv"
        path.write_text("src_id,dst_id\n0,1\n1,2\n")
        g = InterferenceGraph.from_csv(path, n=4)
        assert g.n == 4
        assert g.degrees().tolist() == [1, 1, 0, 0]

    def test_weak_components(self):
        g = InterferenceGraph(4, [(0, 1), (2, 3)])
        labels = g.weak_components()
        assert labels[0] == labels[1]
        assert labels[2] == labels[3]
        assert labels[0] != labels[2]


class TestExposureRules:
    def test_standard_rules_validate(self):
        rules = standard_binary_exposure_rules()
        rules.validate_on_degrees([0, 1, 5])
        assert rules.labels == ["d11", "d10", "d01", "d00"]

    def test_non_exhaustive_detected(self):
        config = [
            {"label": "a", "own_arms": [1], "counts": {2: [0, 0]}},
            {"label": "b", "own_arms": [2], "counts": {}},
        ]
        rules = ExposureRules.from_config(config, base_k=2)
        with pytest.raises(ValueError, match="no exposure matches"):
            rules.validate_on_degrees([1])

    def test_overlap_detected(self):
        config = [
            {"label": "a", "own_arms": [1, 2], "counts": {}},
            {"label": "b", "own_arms": [2], "counts": {}},
        ]
        rules = ExposureRules.from_config(config, base_k=2)
        with pytest.raises(ValueError, match="overlap"):
            rules.validate_on_degrees([0])


def four_arm_session_rules():
    """Twelve exposure labels over four base sessions (two first-round,
    two second-round arms), expressed purely as configuration: second-round
    units are classified by their friends' first-round memberships."""
    rules = []
    rules.append({"label": "e01_frs", "own_arms": [1], "counts": {}})
    rules.append({"label": "e02_fri", "own_arms": [2], "counts": {}})
    for own, tag in ((3, "srs"), (4, "sri")):
        rules += [
            {"label": f"{tag}_none_first_round", "own_arms": [own],
             "counts": {1: [0, 0], 2: [0, 0]}},
            {"label": f"{tag}_frs_only", "own_arms": [own],
             "counts": {1: [1, None], 2: [0, 0]}},
            {"label": f"{tag}_one_fri", "own_arms": [own], "counts": {2: [1, 1]}},
            {"label": f"{tag}_two_fri", "own_arms": [own], "counts": {2: [2, 2]}},
            {"label": f"{tag}_many_fri", "own_arms": [own], "counts": {2: [3, None]}},
        ]
    return ExposureRules.from_config(rules, base_k=4)


class TestTwelveExposureTable:
    def test_exhaustive_and_exclusive_as_pure_configuration(self):
        rules = four_arm_session_rules()
        assert len(rules) == 12
        rules.validate_on_degrees(range(0, 6))

    def test_two_fri_friends_hand_count(self):
        # unit 0 nominates 1, 2, 3, 4; exactly two of them sit in the
        # second base arm while unit 0 is in the third
        g = InterferenceGraph(5, [(0, 1), (0, 2), (0, 3), (0, 4)])
        rules = four_arm_session_rules()
        z = np.array([2, 1, 1, 0, 3])  # 0-based arms: unit0 in arm 3
        labels = exposure_map(z, g, rules)
        assert rules.labels[labels[0]] == "srs_two_fri"
        # the isolated-nominee units are first-round members
        assert rules.labels[labels[1]] == "e02_fri"
        assert rules.labels[labels[3]] == "e01_frs"

    def test_derived_design_moments_flow(self):
        g = InterferenceGraph(3, [(0, 1), (1, 2), (2, 0)])
        base = BernoulliDesign(3, [0.25, 0.25, 0.25, 0.25])
        design = derive_exposure_design(base, g, four_arm_session_rules())
        assert design.k == 12
        moments = exact_moments(design)
        per_unit = moments.pi.reshape(design.k, design.n).sum(axis=0)
        assert np.allclose(per_unit, 1.0, atol=1e-12)
        # degree-1 units can never have two or more first-round-intensive
        # friends, and that impossibility is provable from the degree
        mask = design.structural_zero_cells()
        two_fri = design.rules.labels.index("srs_two_fri")
        assert mask[two_fri * 3 : (two_fri + 1) * 3].all()


class TestExposureMap:
    def test_treated_with_treated_neighbor(self):
        g = InterferenceGraph(2, [(0, 1), (1, 0)])
        rules = standard_binary_exposure_rules()
        labels = exposure_map([1, 1], g, rules)
        assert [rules.labels[j] for j in labels] == ["d11", "d11"]

    def test_isolated_untreated_unit(self):
        g = InterferenceGraph(2, [])
        rules = standard_binary_exposure_rules()
        labels = exposure_map([0, 1], g, rules)
        assert rules.labels[labels[0]] == "d00"
        assert rules.labels[labels[1]] == "d10"

    def test_count_rule_on_hand_built_graph(self):
        # five units; unit 0 nominates 1,2,3; exposure "exactly two treated
        # friends while untreated" checked against a hand count
        g = InterferenceGraph(5, [(0, 1), (0, 2), (0, 3)])
        config = [
            {"label": "two_treated", "own_arms": [1], "counts": {2: [2, 2]}},
            {"label": "other_untreated", "own_arms": [1], "counts": {2: [0, 1]}},
            {"label": "other_untreated_many", "own_arms": [1], "counts": {2: [3, None]}},
            {"label": "treated", "own_arms": [2], "counts": {}},
        ]
        rules = ExposureRules.from_config(config, base_k=2)
        z = np.array([0, 1, 1, 0, 1])
        labels = exposure_map(z, g, rules)
        assert rules.labels[labels[0]] == "two_treated"
        assert rules.labels[labels[3]] == "other_untreated"

    def test_undirected_option_changes_counts(self):
        g = InterferenceGraph(2, [(0, 1)])
        rules = standard_binary_exposure_rules()
        z = np.array([1, 0])
        directed = exposure_map(z, g, rules)
        undirected = exposure_map(z, g, rules, undirected=True)
        assert rules.labels[directed[1]] == "d00"  # unit 1 nominates nobody
        assert rules.labels[undirected[1]] == "d01"  # but is nominated by treated 0


class TestDerivedDesign:
    def test_probability_product_for_isolated_direct_exposure(self):
        # unit with degree d: P(treated, no treated neighbors) = 1/2^(d+1)
        g = path_graph(4)  # degrees 1,2,2,1 (undirected path, both directions)
        base = BernoulliDesign(4, [0.5, 0.5])
        design = derive_exposure_design(base, g, standard_binary_exposure_rules())
        moments = exact_moments(design)
        d10 = design.rules.labels.index("d10")
        degrees = g.degrees()
        for i in range(4):
            expected = 0.5 * 0.5 ** degrees[i]
            assert moments.pi[d10 * 4 + i] == pytest.approx(expected, abs=1e-12)

    def test_degree_zero_unit_impossible_exposures(self):
        g = InterferenceGraph(3, [(0, 1), (1, 0)])  # unit 2 isolated
        base = BernoulliDesign(3, [0.5, 0.5])
        design = derive_exposure_design(base, g, standard_binary_exposure_rules())
        mask = design.structural_zero_cells()
        labels = design.rules.labels
        assert mask[labels.index("d11") * 3 + 2]
        assert mask[labels.index("d01") * 3 + 2]
        assert not mask[labels.index("d10") * 3 + 2]
        assert not mask[labels.index("d00") * 3 + 2]

    def test_exact_enumeration_matches_mc(self):
        g = path_graph(3)
        base = BernoulliDesign(3, [0.5, 0.5])
        design = derive_exposure_design(base, g, standard_binary_exposure_rules())
        exact = exact_moments(design)
        reps = 40_000
        mc = mc_moments(design, reps=reps, seed=77)
        live = exact.pi > 0
        se = np.sqrt(exact.pi[live] * (1 - exact.pi[live]) / reps)
        assert np.all(np.abs(mc.pi[live] - exact.pi[live]) <= 4 * se + 1e-9)

    def test_support_is_merged_and_normalized(self):
        g = path_graph(3)
        base = BernoulliDesign(3, [0.5, 0.5])
        design = derive_exposure_design(base, g, standard_binary_exposure_rules())
        table = design.enumerate_support()
        assert len(table) <= 8
        assert table.probabilities.sum() == pytest.approx(1.0, abs=1e-12)

    def test_exposure_probabilities_sum_to_one_per_unit(self):
        g = path_graph(4)
        base = BernoulliDesign(4, [0.3, 0.7])
        design = derive_exposure_design(base, g, standard_binary_exposure_rules())
        moments = exact_moments(design)
        per_unit = moments.pi.reshape(design.k, design.n).sum(axis=0)
        assert np.allclose(per_unit, 1.0, atol=1e-12)

    def test_relabeling_equivariance(self):
        # permuting unit ids permutes exposures consistently
        base_edges = [(0, 1), (1, 2), (2, 0)]
        g = InterferenceGraph(3, base_edges)
        rules = standard_binary_exposure_rules()
        z = np.array([1, 0, 1])
        labels = exposure_map(z, g, rules)
        perm = np.array([2, 0, 1])  # new_id = perm[old_id]
        permuted_edges = [(perm[a], perm[b]) for a, b in base_edges]
        g2 = InterferenceGraph(3, permuted_edges)
        z2 = np.empty(3, dtype=int)
        z2[perm] = z
        labels2 = exposure_map(z2, g2, rules)
        assert np.array_equal(labels2[perm], labels)

    def test_crd_base_not_provable(self):
        g = InterferenceGraph(3, [(0, 1)])
        base = CompletelyRandomizedDesign(3, [1, 2])
        design = derive_exposure_design(base, g, standard_binary_exposure_rules())
        assert not design.structural_zero_cells().any()
        # enumeration still produces the exact zeros
        moments = exact_moments(design)
        assert moments.zero_mask.any()


class TestPositivityReport:
    def test_all_positive_design_clean(self):
        report = positivity_report(exact_moments(BernoulliDesign(3, [0.5, 0.5])))
        assert report.is_clean()

    def test_degree_zero_unit_flagged(self):
        g = InterferenceGraph(3, [(0, 1), (1, 0)])
        base = BernoulliDesign(3, [0.5, 0.5])
        design = derive_exposure_design(base, g, standard_binary_exposure_rules())
        report = positivity_report(exact_moments(design))
        labels = design.rules.labels
        assert (labels.index("d11"), 2) in report.zero_cells
        assert (labels.index("d01"), 2) in report.zero_cells

    def test_small_probability_flagged_on_enumerated_network(self):
        # six units in a line: middle units need four specific neighbors,
        # so some exposures drop below the reporting threshold
        g = path_graph(6)
        base = BernoulliDesign(6, [0.5, 0.5])
        design = derive_exposure_design(base, g, standard_binary_exposure_rules())
        moments = exact_moments(design)
        report = positivity_report(moments, threshold=0.2)
        d10 = design.rules.labels.index("d10")
        flagged = {(a, i) for a, i, _ in report.small_cells}
        for i in range(1, 5):  # interior units have degree 2: pi = 1/8 < 0.2
            assert (d10, i) in flagged
        assert report.zero_count == 0
