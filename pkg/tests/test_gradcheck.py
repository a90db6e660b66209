import pytest

from mixdiv import tensor as T
from mixdiv.errors import ContractViolation
from mixdiv.gradcheck import GradCheckConfig, run_gradcheck
from mixdiv.model import ModelConfig, Parameters

# Small model so each finite-difference sweep stays in seconds. The loose
# tolerance keeps the machinery tests immune to honest h^2 truncation noise;
# genuine backward-rule bugs produce O(1) relative errors and still trip it.
SMALL = dict(num_layers=1, d_model=8, num_heads=2, d_ff=4, tolerance=1e-3,
             seed=4)


def small_config(**kw):
    merged = {**SMALL, **kw}
    return GradCheckConfig(**merged)


class TestRunGradCheck:
    def test_small_model_matches_finite_differences(self):
        result = run_gradcheck(small_config())
        assert result.passed
        assert all(c.passed for c in result.checks)

    def test_plain_batch_mode_also_passes(self):
        result = run_gradcheck(small_config(mixup=False))
        assert result.passed

    def test_corrupted_matmul_rule_is_caught(self):
        result = run_gradcheck(small_config(corrupt=True))
        assert not result.passed

    def test_corruption_flag_restored_after_run(self):
        run_gradcheck(small_config(corrupt=True))
        assert T._corrupt_matmul_grad is False

    def test_every_parameter_is_checked_in_order(self):
        config = small_config()
        result = run_gradcheck(config)
        model_config = ModelConfig(
            src_vocab_size=config.vocab_size,
            tgt_vocab_size=config.vocab_size,
            num_layers=config.num_layers, num_heads=config.num_heads,
            d_model=config.d_model, d_ff=config.d_ff, max_len=8,
            dropout=0.0, label_smoothing=0.1)
        assert [c.name for c in result.checks] == Parameters.names(model_config)

    def test_same_config_gives_identical_report(self):
        a = run_gradcheck(small_config())
        b = run_gradcheck(small_config())
        assert [c.worst_rel_err for c in a.checks] == \
            [c.worst_rel_err for c in b.checks]


class TestReportTable:
    def test_table_lists_each_parameter_with_status(self):
        result = run_gradcheck(small_config())
        table = result.table()
        for check in result.checks:
            assert check.name in table
        assert table.strip().endswith("overall: PASS (tolerance 0.001)")

    def test_failing_run_marks_offenders(self):
        result = run_gradcheck(small_config(corrupt=True))
        table = result.table()
        assert "FAIL" in table
        assert table.strip().endswith("overall: FAIL (tolerance 0.001)")


class TestConfigValidation:
    @pytest.mark.parametrize("bad", [dict(step=0.0), dict(step=-1e-3),
                                     dict(tolerance=0.0), dict(tolerance=-1.0)])
    def test_nonpositive_step_or_tolerance_rejected(self, bad):
        with pytest.raises(ContractViolation):
            small_config(**bad)
