"""Product-key memory layers on a small numpy autograd, with kernels, sharding and a toy trainer."""

__version__ = "0.1.0"

from .embedding_bag import BagBatch, SparseGrad, bag_forward, backward  # noqa: E402
from .memory_layer import MemoryLayer, MemoryPool, attach_layers, make_layer, make_pool  # noqa: E402
from .pk_index import PkIndex, brute_force_topk, init_pk_index, topk, topk_batch  # noqa: E402
from .sharded_memory import MemoryGroup, shard_values, sharded_backward, sharded_bag  # noqa: E402
from .tensor import Tensor, no_grad  # noqa: E402

__all__ = [
    "BagBatch", "SparseGrad", "bag_forward", "backward",
    "MemoryLayer", "MemoryPool", "attach_layers", "make_layer", "make_pool",
    "PkIndex", "brute_force_topk", "init_pk_index", "topk", "topk_batch",
    "MemoryGroup", "shard_values", "sharded_backward", "sharded_bag",
    "Tensor", "no_grad",
]
