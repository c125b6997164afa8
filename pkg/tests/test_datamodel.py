import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from modalsurv.datamodel import (
    ModalityTable,
    PmfPrediction,
    SurvivalRecord,
    ValidationError,
    assemble_cohort,
    read_clinical_dir,
    read_labels,
    read_modality_table,
    write_labels,
    write_modality_table,
)


def table(name, ids, dim=2):
    return ModalityTable(name, dim, {p: np.arange(dim, dtype=float) + i for i, p in enumerate(ids)})


def recs(ids, events=None):
    events = events or [True] * len(ids)
    return [SurvivalRecord(p, 1.0 + i, e) for i, (p, e) in enumerate(zip(ids, events))]


def test_record_rejects_nonpositive_time():
    with pytest.raises(ValidationError):
        SurvivalRecord("A", 0.0, True)
    with pytest.raises(ValidationError):
        SurvivalRecord("A", float("nan"), True)


def test_table_checks_dims_and_finiteness():
    with pytest.raises(ValidationError):
        ModalityTable("x", 2, {"A": [1.0, 2.0, 3.0]})
    with pytest.raises(ValidationError):
        ModalityTable("x", 2, {"A": [1.0, np.inf]})


def test_inner_join_keeps_intersection():
    co = assemble_cohort(recs(["A", "B", "C"]), [table("clinical", ["A", "B"]), table("wsi", ["B", "C"])],
                         ["clinical", "wsi"])
    assert co.ids == ["B"]
    assert co.dropped_ids == ("A", "C")


def test_identity_join_sorted():
    co = assemble_cohort(recs(["B", "A"]), {"clinical": table("clinical", ["A", "B"])}, ["clinical"])
    assert co.ids == ["A", "B"]


def test_discovery_set_counts():
    ids = [f"P{i:03d}" for i in range(95)]
    events = [i < 27 for i in range(95)]
    co = assemble_cohort(recs(ids, events), [table("clinical", ids)], ["clinical"])
    assert co.n == 95 and co.n_events == 27 and co.n - co.n_events == 68


def test_join_errors():
    with pytest.raises(ValidationError, match="no complete cases"):
        assemble_cohort(recs(["A"]), [table("clinical", ["B"])], ["clinical"])
    with pytest.raises(ValidationError, match="duplicate"):
        assemble_cohort(recs(["A"]) + recs(["A"]), [table("clinical", ["A"])], ["clinical"])
    with pytest.raises(ValidationError):
        assemble_cohort(recs(["A"]), [table("clinical", ["A"])], [])
    with pytest.raises(ValidationError):
        assemble_cohort(recs(["A"]), [table("clinical", ["A"])], ["wsi"])


@settings(max_examples=30, deadline=None)
@given(st.permutations(list("ABCDEFG")), st.lists(st.booleans(), min_size=7, max_size=7))
def test_join_is_order_invariant(perm, events):
    base = assemble_cohort(recs(list("ABCDEFG"), events), [table("m", list("ABCDEF"))], ["m"])
    shuffled_records = [r for p in perm for r in recs(list("ABCDEFG"), events) if r.patient_id == p]
    t = table("m", list("ABCDEF"))
    rows = {p: t.rows[p] for p in perm if p in t.rows}
    co = assemble_cohort(shuffled_records, [ModalityTable("m", 2, rows)], ["m"])
    assert co.ids == base.ids
    assert np.array_equal(co.features("m"), base.features("m"))
    assert co.n_events + int((~co.events).sum()) == co.n


def test_pmf_prediction_validates():
    PmfPrediction(np.array([0.2, 0.8]))
    with pytest.raises(ValidationError):
        PmfPrediction(np.array([0.2, 0.7]))
    with pytest.raises(ValidationError):
        PmfPrediction(np.array([-0.1, 1.1]))


def test_cohort_subset_keeps_alignment():
    co = assemble_cohort(recs(list("ABCD")), [table("m", list("ABCD"))], ["m"])
    sub = co.subset([3, 1])
    assert sub.ids == ["D", "B"]
    assert np.array_equal(sub.features("m"), co.features("m")[[3, 1]])


def test_label_and_table_round_trip(tmp_path):
    r = [SurvivalRecord("A", 12.5, True), SurvivalRecord("B", 0.1 + 0.2, False)]
    write_labels(r, tmp_path / "labels.csv")
    assert read_labels(tmp_path / "labels.csv") == r
    t = ModalityTable("wsi", 2, {"A": [1 / 3, -2.0], "B": [1e-300, 7.0]})
    write_modality_table(t, tmp_path / "wsi.csv")
    back = read_modality_table(tmp_path / "wsi.csv")
    assert back.name == "wsi" and back.ids == ["A", "B"]
    for p in t.ids:
        assert np.array_equal(back.rows[p], t.rows[p])


def test_label_file_errors_name_the_line(tmp_path):
    p = tmp_path / "labels.csv"
    p.write_text("patient_id,time_months,event\nA,3,1\nB,4,2\n")
    with pytest.raises(ValidationError, match=r"labels.csv:3"):
        read_labels(p)
    p.write_text("id,time,event\n")
    with pytest.raises(ValidationError, match="header"):
        read_labels(p)


def test_clinical_dir(tmp_path):
    (tmp_path / "P1.json").write_text(json.dumps({"age": 63, "stage": "12a"}))
    (tmp_path / "P2.json").write_text("{bad json")
    with pytest.raises(ValidationError, match="P2.json"):
        read_clinical_dir(tmp_path)
    (tmp_path / "P2.json").write_text(json.dumps({"age": 70}))
    assert read_clinical_dir(tmp_path)["P1"] == {"age": 63, "stage": "12a"}
