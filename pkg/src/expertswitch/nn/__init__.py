from .checkpoint import CheckpointError, dump_network, load_network, read_network, save_network
from .layers import Conv2d, Dense, Flatten, MaxPool2d, ReLU, ShapeError, Sigmoid
from .network import Network, conv_expert, mlp
from .optim import Sgd, SgdConfig, fit, sgd_step

__all__ = [
    "CheckpointError", "Conv2d", "Dense", "Flatten", "MaxPool2d", "Network", "ReLU", "Sgd",
    "SgdConfig", "ShapeError", "Sigmoid", "conv_expert", "dump_network", "fit", "load_network",
    "mlp", "read_network", "save_network", "sgd_step",
]
