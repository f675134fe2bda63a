"""bangsolve: Euler discretization of control-affine optimal control problems
with bang-bang solutions, plus the regularity diagnostics that justify the
first-order convergence estimate (switching growth, duality identity,
coercivity probing, perturbation-family studies)."""

__version__ = "0.1.0"

from .grid import (
    ContinuousSolution,
    ErrorNorms,
    Grid,
    GridFunction,
    GridMismatchError,
    PIECEWISE_CONSTANT,
    PIECEWISE_LINEAR,
    continuous_distance,
    norm,
)
from .model import (
    CATALOG,
    CapabilityError,
    ControlAffineProblem,
    ExtremalTriple,
    Polytope,
    closed_form_solution,
    example1,
    example1_solution,
    example1_switch_time,
    hamiltonian,
    hamiltonian_minimizer,
    make_problem,
    normal_cone_distance,
    switching_function,
)
from .integrate import (
    DivergenceError,
    PiecewiseConstantControl,
    euler_backward_adjoint,
    euler_forward,
    reference_solve,
)
from .pmp import (
    SwitchingConfig,
    SwitchingReport,
    analyze_switching,
    analyze_switching_samples,
    coercivity_constant_bound,
    pmp_residuals,
    robust_switching_margin,
)
from .variation import (
    LinearizationData,
    coercivity_probe,
    duality_check,
    linearize,
    linearized_switching,
    second_variation,
    variational_costate,
    variational_state,
)
from .euler import (
    ConvergenceTable,
    ResidualTriple,
    SweepConfig,
    SweepResult,
    convergence_study,
    embed,
    fit_order,
    residuals,
    solution_distance,
    sweep_solve,
    triple_as_solution,
)
from .perturb import (
    FamilyReport,
    PerturbationSpec,
    member_reference_solution,
    refine_switch_times,
    sample_family,
    uniform_study,
)

__all__ = [name for name in dir() if not name.startswith("_")]
