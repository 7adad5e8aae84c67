"""Reconstruction of piecewise-constant optical parameters from photoacoustic data.

The package simulates initial-pressure data ``H = Gamma * mu * u`` under the
diffusion approximation of light transport and reconstructs the absorption,
diffusion, and Grueneisen maps from such data in two stages: sub-voxel jump
detection / region segmentation, followed by interface-based least-squares
parameter estimation anchored at reference values.
"""

from .volume import (
    GridSpec,
    ParameterMaps,
    PhantomSpec,
    RegionShape,
    ScalarVolume,
    VolumeFormatError,
    load_phantom_json,
    rasterize_phantom,
    read_labels,
    read_volume,
    sample_trilinear,
    save_phantom_json,
    write_labels,
    write_volume,
)
from .scale_space import ScaleSpaceField, derivatives, smooth
from .edge_detect import (
    EdgeOptions,
    JumpSurface,
    check_determinant_condition,
    detect_edges,
    load_surface,
    merge_surfaces,
    predicted_gradient_jump,
    save_surface,
)
from .segment import (
    InterfaceTriangles,
    RegionLabeling,
    StageThresholds,
    build_region_labeling,
    interface_jump_magnitudes,
    match_regions,
    segment,
)
from .estimate import (
    DisconnectedRegionsError,
    EstimateOptions,
    EstimateReport,
    InterfaceSamples,
    PairSamples,
    ReferenceValues,
    RegionEstimate,
    UnderdeterminedError,
    assemble_parameters,
    estimate_mu_over_D,
    estimate_parameters,
    fit_interface_values,
    recover_from_reference_pair,
    solve_loglinear_systems,
)
from .fem import (
    FluenceSolver,
    IlluminationPattern,
    SolveOptions,
    SolverConvergenceError,
    TetMesh,
    absorbed_energy,
    assemble_system,
    build_mesh,
    solve_fluence,
    synthesize_pressure,
    transmission_residual,
)

__version__ = "0.1.0"
