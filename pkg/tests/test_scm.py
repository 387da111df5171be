import itertools

import numpy as np
import pytest

from invtrain.exceptions import (
    CriterionViolatedError,
    InvalidDagError,
    InvalidQueryError,
    InvalidStateError,
    PositivityError,
    UnknownNodeError,
)
from invtrain.schemas import DagDocument
from invtrain.scm import (
    CausalDag,
    Distribution,
    backdoor_adjust,
    backdoor_criterion,
    check_report,
    conditional_mutual_information,
    confounded_chip_graph,
    confounding_gap,
    d_separated,
    interventional_oracle,
    is_instrument,
    joint,
    observational_conditional,
    random_dag,
)

CI_THRESHOLD = 1e-12


def binary(edges, cpts, nodes):
    return CausalDag({n: 2 for n in nodes}, edges, cpts)


@pytest.fixture
def confounded():
    """N -> X, N -> Y, X -> Y with a strong confounder."""
    return binary(
        [("N", "X"), ("N", "Y"), ("X", "Y")],
        {
            "N": [0.3, 0.7],
            "X": [[0.9, 0.1], [0.2, 0.8]],
            # axes: N, X, Y
            "Y": [[[0.8, 0.2], [0.6, 0.4]], [[0.3, 0.7], [0.1, 0.9]]],
        },
        ["N", "X", "Y"],
    )


def test_chain_and_collider():
    chain = binary(
        [("X", "M"), ("M", "Y")],
        {"X": [0.5, 0.5], "M": [[0.7, 0.3], [0.2, 0.8]], "Y": [[0.6, 0.4], [0.1, 0.9]]},
        "XMY",
    )
    assert d_separated(chain, "X", "Y", {"M"})
    assert not d_separated(chain, "X", "Y", set())

    collider = binary(
        [("X", "M"), ("Y", "M")],
        {"X": [0.5, 0.5], "Y": [0.4, 0.6], "M": [[[0.9, 0.1], [0.5, 0.5]], [[0.3, 0.7], [0.2, 0.8]]]},
        "XMY",
    )
    assert d_separated(collider, "X", "Y", set())
    assert not d_separated(collider, "X", "Y", {"M"})


def test_d_separation_rejects_bad_queries(confounded):
    with pytest.raises(InvalidQueryError):
        d_separated(confounded, "X", "X", set())
    with pytest.raises(InvalidQueryError):
        d_separated(confounded, "X", "Y", {"X"})
    with pytest.raises(UnknownNodeError):
        d_separated(confounded, "X", "Q", set())


def test_backdoor_criterion(confounded):
    assert backdoor_criterion(confounded, "X", "Y", {"N"})
    assert not backdoor_criterion(confounded, "X", "Y", set())

    mediated = binary(
        [("N", "X"), ("N", "Y"), ("X", "M"), ("M", "Y")],
        {
            "N": [0.5, 0.5],
            "X": [[0.8, 0.2], [0.3, 0.7]],
            "M": [[0.9, 0.1], [0.2, 0.8]],
            "Y": [[[0.7, 0.3], [0.4, 0.6]], [[0.5, 0.5], [0.1, 0.9]]],
        },
        ["N", "X", "M", "Y"],
    )
    assert not backdoor_criterion(mediated, "X", "Y", {"N", "M"})


def test_interventional_oracle_examples(confounded):
    unconfounded = binary([("X", "Y")], {"X": [0.3, 0.7], "Y": [[0.9, 0.1], [0.25, 0.75]]}, "XY")
    for value in (0, 1):
        np.testing.assert_allclose(
            interventional_oracle(unconfounded, "X", value, "Y").table,
            observational_conditional(unconfounded, "X", value, "Y").table,
        )

    copy = binary([("X", "Y")], {"X": [0.5, 0.5], "Y": [[1.0, 0.0], [0.0, 1.0]]}, "XY")
    np.testing.assert_array_equal(interventional_oracle(copy, "X", 1, "Y").table, [0.0, 1.0])

    g = random_dag(4, np.random.default_rng(5))
    assert interventional_oracle(g, "V0", 1, "V3").table.sum() == pytest.approx(1.0, abs=1e-12)


def test_backdoor_adjust_matches_oracle(confounded):
    for value in (0, 1):
        adjusted = backdoor_adjust(confounded, "X", value, "Y", {"N"}).table
        oracle = interventional_oracle(confounded, "X", value, "Y").table
        np.testing.assert_allclose(adjusted, oracle, atol=1e-10)
        # hand computation of sum_n P(y | x, n) P(n)
        expected = 0.3 * np.array(confounded.cpt("Y")[0, value]) + 0.7 * np.array(confounded.cpt("Y")[1, value])
        np.testing.assert_allclose(adjusted, expected, atol=1e-12)
    assert confounding_gap(confounded, "X", "Y") > 0.05
    with pytest.raises(CriterionViolatedError):
        backdoor_adjust(confounded, "X", 0, "Y", set())


def test_backdoor_adjust_empty_set_collapses():
    g = binary([("X", "Y")], {"X": [0.3, 0.7], "Y": [[0.9, 0.1], [0.25, 0.75]]}, "XY")
    np.testing.assert_allclose(backdoor_adjust(g, "X", 1, "Y", set()).table, [0.25, 0.75])
    assert confounding_gap(g, "X", "Y") == pytest.approx(0.0, abs=1e-15)


def test_backdoor_adjust_positivity():
    g = binary(
        [("N", "X"), ("N", "Y"), ("X", "Y")],
        {
            "N": [0.5, 0.5],
            "X": [[1.0, 0.0], [0.5, 0.5]],
            "Y": [[[0.8, 0.2], [0.6, 0.4]], [[0.3, 0.7], [0.1, 0.9]]],
        },
        ["N", "X", "Y"],
    )
    with pytest.raises(PositivityError):
        backdoor_adjust(g, "X", 1, "Y", {"N"})
    with pytest.raises(InvalidStateError):
        backdoor_adjust(g, "X", 2, "Y", {"N"})


def test_is_instrument():
    g = confounded_chip_graph(0.9)
    assert is_instrument(g, "A", "X", "Y")
    assert not is_instrument(g, "N", "X", "Y")

    direct = binary(
        [("Z", "X"), ("Z", "Y"), ("X", "Y")],
        {"Z": [0.5, 0.5], "X": [[0.8, 0.2], [0.3, 0.7]], "Y": [[[0.7, 0.3], [0.4, 0.6]], [[0.5, 0.5], [0.1, 0.9]]]},
        ["Z", "X", "Y"],
    )
    assert not is_instrument(direct, "Z", "X", "Y")

    loose = binary([("X", "Y")], {"Z": [0.5, 0.5], "X": [0.5, 0.5], "Y": [[0.9, 0.1], [0.2, 0.8]]}, ["Z", "X", "Y"])
    assert not is_instrument(loose, "Z", "X", "Y")


def test_invalid_dags():
    with pytest.raises(InvalidDagError):
        binary([("A", "B"), ("B", "A")], {"A": [[0.5, 0.5]] * 2, "B": [[0.5, 0.5]] * 2}, "AB")
    with pytest.raises(InvalidDagError):
        binary([("A", "B")], {"A": [0.5, 0.5], "B": [0.5, 0.5]}, "AB")
    with pytest.raises(InvalidDagError):
        binary([], {"A": [0.6, 0.6]}, "A")
    with pytest.raises(InvalidDagError):
        binary([], {"A": [1.2, -0.2]}, "A")
    with pytest.raises(InvalidDagError):
        binary([], {}, "A")


def test_document_round_trip_keeps_parent_order(confounded):
    document = confounded.to_document()
    rebuilt = CausalDag.from_document(DagDocument.model_validate_json(document.model_dump_json()))
    assert rebuilt.parents("Y") == ["N", "X"]
    np.testing.assert_array_equal(rebuilt.cpt("Y"), confounded.cpt("Y"))


def test_mutilate_leaves_original_untouched(confounded):
    mutilated = confounded.mutilate("X", 1)
    assert mutilated.parents("X") == []
    assert confounded.parents("X") == ["N"]
    np.testing.assert_array_equal(mutilated.cpt("X"), [0.0, 1.0])


def test_distribution_operations(confounded):
    dist = joint(confounded)
    assert dist.table.sum() == pytest.approx(1.0, abs=1e-12)
    np.testing.assert_allclose(dist.marginalize(["N"]).table, [0.3, 0.7])
    conditioned = dist.marginalize(["X", "N"]).condition("N", 0)
    np.testing.assert_allclose(conditioned.table, [0.9, 0.1])
    with pytest.raises(ValueError):
        Distribution(["A"], [0.5, 0.6])


def test_check_report_content(confounded):
    report = check_report(confounded, "X", "Y", ["N"], value=1)
    assert report["backdoor_criterion"] is True
    assert len(report["states"]) == 1
    np.testing.assert_allclose(report["states"][0]["adjusted"], report["states"][0]["interventional"], atol=1e-10)

    report = check_report(confounded, "X", "Y", [])
    assert report["backdoor_criterion"] is False
    assert [state["adjusted"] for state in report["states"]] == [None, None]


def _ci_oracle(dist, x, y, z):
    return conditional_mutual_information(dist, x, y, z) < CI_THRESHOLD


def test_d_separation_matches_enumeration():
    rng = np.random.default_rng(11)
    for _ in range(200):
        g = random_dag(6, rng, edge_probability=0.4)
        dist = joint(g)
        nodes = g.nodes
        for x, y in itertools.combinations(nodes, 2):
            rest = [n for n in nodes if n not in (x, y)]
            for size in (0, 1, 2):
                z = list(rng.choice(rest, size=size, replace=False)) if size else []
                assert d_separated(g, x, y, z) == _ci_oracle(dist, x, y, z), (g.edges, x, y, z)


def test_backdoor_adjust_on_random_graphs():
    rng = np.random.default_rng(3)
    checked = 0
    while checked < 200:
        g = random_dag(int(rng.integers(3, 7)), rng)
        x, y = rng.choice(g.nodes, size=2, replace=False)
        candidates = [set(g.parents(x)) - {y}, set()]
        for z in candidates:
            if backdoor_criterion(g, x, y, z):
                for value in range(2):
                    adjusted = backdoor_adjust(g, x, value, y, z).table
                    oracle = interventional_oracle(g, x, value, y).table
                    assert np.max(np.abs(adjusted - oracle)) < 1e-10
                checked += 1
                break


def test_confounded_chip_graph_structure():
    g = confounded_chip_graph(0.95, num_classes=3)
    assert set(g.edges) == {("A", "X"), ("N", "X"), ("X", "Y"), ("N", "Y")}
    assert backdoor_criterion(g, "X", "Y", {"N"})
    assert confounding_gap(g, "X", "Y") > confounding_gap(confounded_chip_graph(0.0, num_classes=3), "X", "Y")


def test_confounded_chip_graph_puts_the_correlation_in_the_label():
    g = confounded_chip_graph(0.8, num_classes=3, smoothing=0.0)
    np.testing.assert_allclose(g.cpt("N"), [1 / 3] * 3)
    assert g.parents("Y") == ["X", "N"]
    labels = g.cpt("Y")
    np.testing.assert_allclose(labels[0, 2], [0.2, 0.0, 0.8])
    np.testing.assert_allclose(labels[1, 1], [0.0, 1.0, 0.0])
