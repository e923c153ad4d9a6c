"""Self-modifying checksum kernels for x86-64, with reference models,
a timing-aware integrity guard and a benchmark harness."""

from .errors import SmcError
from .oracle import ChecksumState, ModificationSite, Region, checksum_region, emulate_unrolled

__version__ = "0.1.0"

__all__ = ["SmcError", "ChecksumState", "ModificationSite", "Region",
           "checksum_region", "emulate_unrolled", "__version__"]
