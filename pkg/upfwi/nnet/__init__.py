from .tensor import Tensor, no_grad
from .layers import Module, Parameter, Conv2d, BatchNorm2d, LeakyReLU, Linear, Upsample, CenterCrop, Tile, Sequential
from .network import NetConfig, InversionNet, build_inversion_net, count_parameters, forward, prepare_input
from .optim import TrainState, optimizer_step, lr_schedule
from .checkpoint import save_checkpoint, load_checkpoint
