import math

import numpy as np
import pytest
from hypothesis import assume, given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from agents.evaluation_agent import EvaluationAgent, evaluate_masks, summary_table
from knowledge.tissue_knowledge import CSF, GM, WM
from models.report_model import ClassMetrics, MetricReport
from models.unet import UNet
from utils.exceptions import ShapeError
from utils.metrics import asd, boundary, dice

masks = arrays(bool, (10, 12), elements=st.booleans())


def test_dice_hand_values():
    a = np.array([[1, 1, 0, 0]], dtype=bool)
    b = np.array([[0, 1, 1, 0]], dtype=bool)
    assert dice(a, b) == pytest.approx(0.5)
    assert dice(a, a) == 1.0
    assert dice(np.zeros((2, 2)), np.zeros((2, 2))) == 1.0
    assert dice(a, np.zeros_like(a)) == 0.0
    with pytest.raises(ShapeError):
        dice(a, np.zeros((2, 2)))


def test_boundary_of_a_square():
    mask = np.zeros((5, 5), dtype=bool)
    mask[1:4, 1:4] = True
    expected = mask.copy()
    expected[2, 2] = False
    np.testing.assert_array_equal(boundary(mask), expected)


def test_mask_touching_the_grid_edge_is_boundary_there():
    mask = np.ones((3, 3), dtype=bool)
    expected = np.ones((3, 3), dtype=bool)
    expected[1, 1] = False
    np.testing.assert_array_equal(boundary(mask), expected)


def test_asd_hand_values():
    a = np.zeros((1, 8), dtype=bool)
    b = np.zeros((1, 8), dtype=bool)
    a[0, 1] = True
    b[0, 4] = True
    assert asd(a, b) == pytest.approx(3.0)
    assert asd(a, b, spacing=(1.0, 0.5)) == pytest.approx(1.5)
    assert asd(a, a) == 0.0
    assert math.isnan(asd(a, np.zeros_like(a)))
    with pytest.raises(ValueError):
        asd(a, b, method="hausdorff")


@given(masks, masks)
def test_asd_is_symmetric_and_methods_agree(a, b):
    assume(a.any() and b.any())
    brute = asd(a, b, method="brute")
    assert brute == pytest.approx(asd(b, a, method="brute"))
    assert brute == pytest.approx(asd(a, b, method="edt"), abs=1e-9)
    assert brute >= 0.0


@given(masks)
def test_dice_is_one_on_identical_masks(a):
    assert dice(a, a) == 1.0


def test_evaluate_masks_perfect_and_missing():
    label = np.zeros((8, 8), dtype=int)
    label[2:6, 2:6] = GM
    label[3:5, 3:5] = WM
    rows = evaluate_masks(label, label, sample=0)
    by_tissue = {r.tissue: r for r in rows}
    assert by_tissue["GM"].dice == 1.0 and by_tissue["GM"].asd == 0.0
    assert by_tissue["CSF"].asd_missing and by_tissue["CSF"].asd is None
    assert by_tissue["CSF"].dice == 1.0


def _report(shots, dices):
    rows = [ClassMetrics(sample=i, tissue=t, dice=d, asd=1.0 + i)
            for i, d in enumerate(dices) for t in ("CSF", "GM", "WM")]
    return MetricReport(run_id="r", domain="isointense", shots=shots, rows=rows)


def test_report_aggregation_and_summary():
    report = _report(1, [0.6, 0.8])
    stats = report.aggregate()
    assert stats["GM"]["dice_mean"] == pytest.approx(0.7)
    assert stats["GM"]["dice_std"] == pytest.approx(0.1)
    assert stats["WM"]["asd_mean"] == pytest.approx(1.5)
    assert report.mean_dice() == pytest.approx(0.7)
    assert list(report.to_frame().columns) == ["run_id", "domain", "shots", "sample", "class", "dice", "asd"]
    table = summary_table([report, _report(5, [0.9, 0.9])])
    assert "0.7000±0.1000" in table
    assert "Dice GM" in table and "ASD WM" in table


def test_write_csv_appends(tmp_path):
    path = tmp_path / "out" / "meta_test.csv"
    EvaluationAgent.write_csv([_report(1, [0.5])], path)
    EvaluationAgent.write_csv([_report(5, [0.5])], path, append=True)
    lines = path.read_text().splitlines()
    assert lines[0] == "run_id,domain,shots,sample,class,dice,asd"
    assert len(lines) == 1 + 6


def test_evaluate_run_scores_every_tissue(tiny_network_config, rng):
    network = UNet(tiny_network_config)
    params = network.init_params(0)
    images = rng.uniform(size=(2, 16, 16))
    labels = rng.integers(0, 4, size=(2, 16, 16))
    report = EvaluationAgent(network, workers=2).evaluate_run(params, images, labels, "run", "isointense", 0)
    assert len(report.rows) == 2 * 3
    assert {r.tissue for r in report.rows} == {"CSF", "GM", "WM"}
    assert all(0.0 <= r.dice <= 1.0 for r in report.rows)
    with pytest.raises(ValueError):
        EvaluationAgent(network).evaluate_run(params, images[:0], labels[:0], "run", "x", 0)
