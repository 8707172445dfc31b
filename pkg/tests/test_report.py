import pytest

from errors import ShapeError
from evalgrid import RunRecord
from report import build_table, read_table, table_from_records, to_delimited, to_markdown, write_report

METHODS = ["SIFT", "Superpoint", "Triplet", "ArcFace"]


def test_zebrafish_row_marks():
    table = build_table({"AAUZebraFish": {"SIFT": 65.09, "Superpoint": 25.09, "Triplet": 99.40, "ArcFace": 98.95}})
    [row] = table.rows
    assert row.best == {"Triplet"}
    assert row.second == {"ArcFace"}
    markdown = to_markdown(table)
    assert "**99.40**" in markdown
    assert "_98.95_" in markdown
    assert "| AAUZebraFish | 65.09 | 25.09 | **99.40** | _98.95_ |" in markdown


def test_tied_maxima_share_best():
    [row] = build_table({"d": {"SIFT": 80.0, "Superpoint": 90.0, "Triplet": 90.0, "ArcFace": 70.0}}).rows
    assert row.best == {"Superpoint", "Triplet"}
    assert row.second == {"SIFT"}


def test_all_equal_row_is_all_best():
    [row] = build_table({"AerialCattle2017": {m: 100.0 for m in METHODS}}).rows
    assert row.best == set(METHODS)
    assert row.second == frozenset()


def test_ragged_rows_are_rejected():
    with pytest.raises(ShapeError):
        build_table({"a": {"SIFT": 1.0, "ArcFace": 2.0}, "b": {"SIFT": 1.0}})


def test_absent_values():
    table = build_table({"d": {"SIFT": None, "ArcFace": 50.0, "Triplet": 40.0}})
    [row] = table.rows
    assert row.best == {"ArcFace"} and row.second == {"Triplet"}
    assert to_delimited(table) == "dataset,SIFT,ArcFace,Triplet\nd,,50.00,40.00\n"
    assert "| d | - | **50.00** | _40.00_ |" in to_markdown(table)


def test_table_from_records_uses_median_percent():
    records = [
        RunRecord("zebra", {"method": "arcface", "lr": 0.1}, 0.9, False, 0),
        RunRecord("zebra", {"method": "arcface", "lr": 0.01}, 0.8, False, 0),
        RunRecord("zebra", {"method": "arcface", "lr": 0.001}, 0.7, False, 0),
        RunRecord("zebra", {"method": "triplet", "lr": 0.1}, None, True, 0),
        RunRecord("zebra", {"method": "triplet", "lr": 0.01}, 0.95, False, 0),
    ]
    table = table_from_records(records)
    assert table.methods == ("arcface", "triplet")
    [row] = table.rows
    assert row.values["arcface"] == pytest.approx(80.0)
    assert row.values["triplet"] == pytest.approx(95.0)
    assert row.best == {"triplet"}


def test_write_and_read_table(tmp_path):
    table = build_table({"a": {"SIFT": 10.0, "ArcFace": 20.0}, "b": {"SIFT": 30.0, "ArcFace": None}})
    write_report(table, tmp_path / "t.csv", markdown_path=tmp_path / "t.md")
    again = read_table(tmp_path / "t.csv")
    assert again.methods == table.methods
    assert [r.values for r in again.rows] == [r.values for r in table.rows]
    assert (tmp_path / "t.md").read_text(encoding="utf-8").startswith("| dataset | SIFT | ArcFace |")


def test_table_columns_by_backbone():
    records = [
        RunRecord("zebra", {"method": "arcface", "backbone": "Swin-B"}, 0.9, False, 0),
        RunRecord("zebra", {"method": "triplet", "backbone": "Swin-B"}, 0.7, False, 0),
        RunRecord("zebra", {"method": "arcface", "backbone": "EfficientNet-B3"}, 0.6, False, 0),
    ]
    table = table_from_records(records, column_by="backbone")
    assert table.methods == ("EfficientNet-B3", "Swin-B")
    [row] = table.rows
    assert row.values["Swin-B"] == pytest.approx(80.0)
    assert row.best == {"Swin-B"}


def test_quoted_dataset_name_survives_round_trip(tmp_path):
    table = build_table({"Whales, humpback": {"SIFT": 12.5, "ArcFace": 40.0}, "plain": {"SIFT": 1.0, "ArcFace": 2.0}})
    write_report(table, tmp_path / "t.csv")
    assert tmp_path.joinpath("t.csv").read_text(encoding="utf-8").splitlines()[1].startswith('"Whales, humpback",')
    again = read_table(tmp_path / "t.csv")
    assert [r.dataset for r in again.rows] == ["Whales, humpback", "plain"]
    assert again.rows[0].values == {"SIFT": 12.5, "ArcFace": 40.0}
