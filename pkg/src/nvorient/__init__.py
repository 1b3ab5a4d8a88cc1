"""Vector magnetometry with NV ensembles: forward model, spectra, inverse solver."""

from .errors import *  # noqa: F401,F403
from .physics import (
    DEFAULT_CONSTANTS,
    FieldVector,
    PhysicalConstants,
    ProjectionSet,
    SpinLevels,
    estimate_total_magnitudes,
    invert_splitting,
    project,
    solve_levels,
    solve_levels_hyperfine,
    splitting,
    total_field_magnitude,
)
from .geometry import (
    EXPERIMENTAL_BULK_AXES,
    KNOWN_100_AXES,
    AxesSet,
    OrientationParams,
    axes_from_params,
    great_circle_distance,
    intersect_three_spheres,
    intersect_two_spheres,
    match_axes,
    resolve_unique,
)
from .spectra import (
    FrequencyGrid,
    NoiseSpec,
    OdmrSpectrum,
    PeakSet,
    SplittingTable,
    fit_peaks,
    merge_hyperfine,
    splittings_from_peaks,
    synthesize,
)
from .reconstruction import (
    CoilModel,
    ReconstructionConfig,
    ReconstructionResult,
    axes_dispersion,
    calibrate_coils,
    cost,
    delta_b,
    reconstruct,
)

__version__ = "0.1.0"
