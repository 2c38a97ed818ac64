"""Second-order cone solvers: the in-package reference IPM and an adapter."""

from __future__ import annotations

from ..socp import ConicProgram
from .ipm import solve_reference
from .result import BACKENDS, STATUSES, ConicSolution, SolverSettings


def solve(program: ConicProgram, settings: SolverSettings | None = None, initial=None) -> ConicSolution:
    settings = settings or SolverSettings()
    program.validate()
    if settings.backend == "clarabel":
        from .clarabel_backend import solve_clarabel

        return solve_clarabel(program, settings)
    return solve_reference(program, settings, initial=initial)


class SolverSession:
    """Reusable solver for a sequence of programs sharing one structure."""

    def __init__(self, settings: SolverSettings | None = None):
        self.settings = settings or SolverSettings()
        self._clarabel = None

    def solve(self, program: ConicProgram, initial=None) -> ConicSolution:
        if self.settings.backend == "clarabel":
            from .clarabel_backend import ClarabelSession

            if self._clarabel is None:
                self._clarabel = ClarabelSession(program, self.settings)
            return self._clarabel.solve(program)
        return solve_reference(program, self.settings, initial=initial)


__all__ = ["solve", "load_program", "SolverSession", "SolverSettings", "ConicSolution", "STATUSES", "BACKENDS"]


def load_program(path) -> ConicProgram:
    """Read a program written by :func:`smpc.socp.write_conic`."""
    from ..socp import read_conic

    return read_conic(path)
