from fractions import Fraction

import pytest
from hypothesis import given
from hypothesis import strategies as st

from msgrad.workunits import (WorkUnitLedger, charge_mge_step, closed_form, doubling_batches,
                              level_weight, mge_step_cost)


class TestLedger:
    def test_charges(self):
        assert WorkUnitLedger().charge(1, 16).total == 16
        assert WorkUnitLedger().charge(2, 16).total == 4
        assert WorkUnitLedger().charge(3, 8).total == Fraction(1, 2)

    def test_invalid(self):
        with pytest.raises(ValueError):
            WorkUnitLedger().charge(0, 1)
        with pytest.raises(ValueError):
            WorkUnitLedger().charge(1, -1)
        with pytest.raises(ValueError):
            level_weight(0)

    @given(st.lists(st.tuples(st.integers(1, 8), st.integers(0, 1000)), max_size=20),
           st.lists(st.tuples(st.integers(1, 8), st.integers(0, 1000)), max_size=20))
    def test_additive_and_recomputable(self, xs, ys):
        a, b = WorkUnitLedger(), WorkUnitLedger()
        for lv, n in xs:
            a.charge(lv, n)
        for lv, n in ys:
            b.charge(lv, n)
        c = a + b
        assert c.total == a.total + b.total
        assert c.recompute() == c.total
        assert c.total >= 0

    def test_csv_round_trip(self, tmp_path):
        led = WorkUnitLedger().charge(1, 3).charge(2, 5).charge(1, 2)
        path = tmp_path / "ledger.csv"
        led.dump_csv(path)
        lines = path.read_text().splitlines()
        assert lines[0] == "level,images,wu_numerator,wu_denominator"
        assert lines[1:] == ["1,5,5,1", "2,5,5,4", "total,10,25,4"]
        assert WorkUnitLedger.read_total(path) == Fraction(25, 4)


class TestStepCosts:
    @pytest.mark.parametrize("n", [4, 8, 16, 400])
    def test_two_level_step(self, n):
        assert mge_step_cost([n // 4, n]) == Fraction(9 * n, 16)

    def test_four_level_constant(self):
        # per-step cost of the doubling plan over four levels is 37/16 n1
        assert mge_step_cost(doubling_batches(16, 4)) == 37

    def test_charge_mge_step_matches_cost(self):
        led = WorkUnitLedger()
        charge_mge_step(led, [4, 8, 16], first_level=2)
        assert led.total == mge_step_cost([4, 8, 16], first_level=2)
        assert led.entries[0] == (4, 16)


class TestClosedForms:
    def test_single(self):
        assert closed_form("single", 16, 2000, 4) == 480000

    def test_multiscale(self):
        assert closed_form("multiscale", 16, 2000, 4) == 74000

    def test_full_multiscale_decreasing_schedule(self):
        assert closed_form("full_multiscale", 16, [2000, 1000, 500, 250], 4) == 28750
        assert closed_form("full_multiscale", 16, [2000, 1000, 500, 250], 4) == Fraction(115, 128) * 16 * 2000

    def test_full_multiscale_equal_iterations(self):
        assert closed_form("full_multiscale", 16, 2000, 4) == 126000
        assert closed_form("full_multiscale", 16, 2000, 4) == Fraction(63, 16) * 16 * 2000

    def test_fewer_levels(self):
        # levels ablation: 68k / 19.5k at three levels, 56k / 11k at two
        assert closed_form("multiscale", 16, 2000, 3) == 68000
        assert closed_form("full_multiscale", 16, [1000, 500, 250], 3) == 19500
        assert closed_form("multiscale", 16, 2000, 2) == 56000
        assert closed_form("full_multiscale", 16, [500, 250], 2) == 11000

    def test_unsupported(self):
        with pytest.raises(ValueError):
            closed_form("annealed", 16, 10, 4)
        with pytest.raises(ValueError):
            closed_form("full_multiscale", 16, [1, 2], 4)
        with pytest.raises(ValueError):
            closed_form("single", 16, [1, 2], 4)
