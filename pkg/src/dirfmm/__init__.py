"""Parallel directional fast multipole method for the 3-D Helmholtz kernel."""

from .core import ProblemConfig, kernel, kernel_matrix
from .engine import Engine, run_sequential
from .errors import (CacheFormatError, ConfigError, DirFMMError, NumericalError, ProtocolError,
                     TransportError)
from .geometry import (PointCloud, TriangleMesh, analytic_sphere, load_obj, make_cloud,
                       sample_surface)
from .octree import BoxKey, build_octree, interaction_lists, near_field
from .oracle import direct_potentials, validate
from .partition import PartitionMap, build_partition, kmeans_points
from .pipeline import solve
from .precompute import (PrecomputeCache, SkeletonData, build_directional_skeleton,
                         build_lowfreq_surfaces, load_cache, precompute, save_cache)
from .report import RunReport
from .runtime import ChargeRecord, CommStats, plan_exchanges, run_parallel
from .wedges import DirectionIndex, assign_direction, parent_direction

__version__ = "0.1.0"
