from icode_rca.errors import ArtifactError, CheckpointError, DivergenceError, IcodeError, ShapeError, ValidationError
from icode_rca.run_result import RunResult


class TestRunResult:

    def test_result_code_success(self):
        result = RunResult("simulate")
        assert result.result_code() == 0

    def test_result_code_validation(self):
        assert RunResult("train").set_error(ValidationError("bad")).result_code() == 2

    def test_result_code_shape_and_checkpoint(self):
        assert RunResult("analyze").set_error(ShapeError("bad")).result_code() == 2
        assert RunResult("analyze").set_error(CheckpointError("bad")).result_code() == 2

    def test_result_code_divergence(self):
        assert RunResult("train").set_error(DivergenceError("overflow", epoch=1)).result_code() == 3

    def test_result_code_artifact(self):
        assert RunResult("analyze").set_error(ArtifactError("missing")).result_code() == 4

    def test_result_code_generic(self):
        assert RunResult("audit").set_error(IcodeError("mismatch")).result_code() == 1

    def test_failed_cells_report_the_first_failure(self):
        result = RunResult("benchmark")
        result.add_failed_cell("Lorenz96-alpha1-seed0", DivergenceError("overflow"))
        result.add_failed_cell("LotkaVolterra-alpha1-seed0", ArtifactError("missing"))
        assert result.result_code() == 3

    def test_repr(self):
        result = RunResult("train").add_artifact("loss_log", "runs/loss.csv").add_artifact("checkpoint", "runs/m.json")
        assert repr(result) == "RunResult(command=train, "\
            "code=0, "\
            "error=None, "\
            "failed_cells=[], "\
            "artifacts=['checkpoint', 'loss_log'])"
