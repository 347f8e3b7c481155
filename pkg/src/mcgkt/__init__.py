"""numpy deraining toolkit: autodiff core, layers, the encoder/decoder model,
synthetic rain, PSNR/SSIM, a trainer and a CLI."""
from .archive import WeightArchive
from .errors import (ConfigError, DataIOError, FormatError, MappingError, MCGKTError,
                     NumericError, ShapeError, UsageError)
from .metrics import EvalReport, evaluate_dir, psnr, ssim
from .model import (ImportReport, MCGKTModel, ModelConfig, expected_parameter_count, import_ekt,
                    init_model, load_model, save_model)
from .rain import ImagePair, RainConfig, make_synthetic_dataset, synthesize_rain
from .tensor import Tensor, backward, no_grad
from .train import AdamState, TrainConfig, resume, run_ablation, train

__version__ = "0.1.0"
