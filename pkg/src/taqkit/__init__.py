"""taqkit: desk-scale post-training quantization for DiT-style blocks.

Uniform affine quantizers at four granularities, momentum-based channel
shifting with exact bias folding, outlier-channel migration/splitting, and
joint scale/shift/factor reconstruction against full-precision outputs, all
on a miniature transformer block with a synthetic timestep-varying
calibration generator.
"""

from .linalg import (GELU_ARGMIN, GELU_MIN, LinearLayer, gelu, gelu_grad,
                     linear_forward, matmul)
from .quantizer import (Granularity, QuantParams, QuantizedTensor,
                        calibrate_params, dequantize, fake_quantize, quantize,
                        round_half_away)
from .transforms import (MigrationPlan, ShiftState, apply_shift,
                         channel_mid_range, fold_shift_into_bias,
                         init_migration_factors, migrate, momentum_update,
                         select_outlier_channels, split_channels)
from .toydit import (CalibrationSet, ToyDiTBlock, block_forward,
                     generate_calibration, pf_input, post_gelu_capture,
                     random_block)
from .reconstruction import (FeedForwardUnit, LinearUnit, ReconConfig,
                             ReconTrace, block_loss, reconstruct_joint,
                             reconstruct_separate, ste_gradient,
                             write_trace_csv)
from .metrics import (OccupancyReport, bin_occupancy, channel_range_profile,
                      quant_mse)
from .pipeline import (PipelineConfig, QuantizedModel, compare_static_dynamic,
                       evaluate_model, quantize_model)
from .fileio import (load_calibration, load_model, save_calibration,
                     save_model)

__version__ = "0.1.0"
