"""nestqr — hierarchical sparsified-QR preconditioner for sparse systems.

Factorizes an unsymmetric sparse matrix as A ≈ Q W with Q orthogonal and
W easy to invert, by nested-dissection block QR interleaved with low-rank
compression of separator interfaces. The accuracy knob eps trades factor
cost for GMRES iterations.
"""

__version__ = "0.1.0"

from .errors import (
    NestqrError,
    FormatError,
    SingularPivotError,
    IllConditionedInterfaceError,
    StructurallySingularError,
    PartitionError,
    NotConvergedError,
)
from .sparse import (
    SparseMat,
    equilibrate_columns,
    gather_block,
    scatter_block,
    read_matrix_market,
    write_matrix_market,
)
