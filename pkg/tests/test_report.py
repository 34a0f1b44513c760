"""Report rendering tests: CSV contents and figure files."""

from microyolo.evaluation import evaluate_detections
from microyolo.head import Box, Detection
from microyolo.profiler import DeviceMeasurement, compare_report
from microyolo.report import (loss_figure, pr_curve_data, pr_figure,
                              profile_figure, write_eval_csv,
                              write_profile_csv)


def _report():
    rows = [DeviceMeasurement("a", 1.2, 50, 5.5, 35.64),
            DeviceMeasurement("b", 3.3, 192, 359, 110.0)]
    return compare_report(rows, macs=29_425_000)


class TestProfileOutputs:
    def test_csv_round_numbers(self, tmp_path):
        path = write_profile_csv(_report(), tmp_path / "m.csv")
        lines = path.read_text().splitlines()
        assert lines[0].split(",")[:2] == ["device", "voltage_v"]
        assert len(lines) == 3
        assert "latency_ratio" in lines[0]

    def test_figure_written(self, tmp_path):
        path = profile_figure(_report(), tmp_path / "devices.png")
        assert path.stat().st_size > 1000
        assert path.read_bytes()[:4] == b"\x89PNG"


class TestEvalOutputs:
    def _result(self):
        gts = [[Box(0.5, 0.5, 0.2, 0.2, 0)]]
        dets = [[Detection(0.5, 0.5, 0.2, 0.2, 0, 0.9),
                 Detection(0.2, 0.2, 0.1, 0.1, 0, 0.4)]]
        return dets, gts, evaluate_detections(dets, gts, num_classes=1)

    def test_eval_csv(self, tmp_path):
        _, _, result = self._result()
        path = write_eval_csv(result, tmp_path / "r.csv")
        lines = path.read_text().splitlines()
        assert lines[0] == "class,ap,num_gt"
        assert lines[-1].startswith("mAP,")

    def test_pr_figure(self, tmp_path):
        dets, gts, _ = self._result()
        curves = pr_curve_data(dets, gts, num_classes=1)
        assert 0 in curves
        recall, precision = curves[0]
        assert recall[-1] == 1.0
        path = pr_figure({"class 0": curves[0]}, tmp_path / "pr.png")
        assert path.read_bytes()[:4] == b"\x89PNG"


class TestLossFigure:
    def test_written_with_phase_marker(self, tmp_path):
        from microyolo.train import EpochLog
        history = [EpochLog(i, "float" if i < 3 else "qat", 1e-3,
                            10.0 / (i + 1), 11.0 / (i + 1), 1.0)
                   for i in range(5)]
        path = loss_figure(history, tmp_path / "loss.png")
        assert path.read_bytes()[:4] == b"\x89PNG"
