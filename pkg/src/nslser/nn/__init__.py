from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import (
    ConfigError,
    LayerSpec,
    ModelConfig,
    add,
    conv2d,
    count_params,
    dense,
    dump_model_config,
    flatten,
    global_avg_pool,
    load_model_config,
    maxpool2d,
    parse_model_config,
    relu,
    save_model_config,
)
from .gradcheck import GradCheckResult, grad_check
from .model import (
    ModelState,
    ShapeError,
    Taps,
    backprop,
    forward,
    forward_with_taps,
    init_params,
    init_state,
    predict,
    softmax,
    value_and_grad,
)
from .zoo import BUILTIN, resolve_model
