"""quantdiff: post-training quantization workbench for a toy diffusion model."""

from .analysis import (ActivationProfile, QualityReport, TimestepErrorCurve,
                       activation_profile, compare_strategies, energy_distance,
                       mode_coverage, per_timestep_mse, quality_report)
from .calibration import (CalibOptConfig, CalibrationSample, CalibrationSet,
                          ReconstructionBlock, adaround_reconstruct_block,
                          build_calibration_set, calibrate_activations,
                          partition_blocks, run_calibration)
from .checkpoint import (load_calibration_set, load_checkpoint, load_model,
                         load_quantized_model, save_calibration_set,
                         save_checkpoint, save_model, save_quantized_model)
from .config import RunConfig, load_config, parse_config, render_config, save_config
from .datasets import gmm8, gmm8_centers, make_dataset, swiss_roll
from .diffusion import (NoiseSchedule, SamplerPlan, Trajectory, ddim_sample,
                        make_linear_schedule, make_plan, moving_average, q_sample,
                        simple_loss, train)
from .network import NoisePredictor, build_model, model_forward, time_embedding
from .quantizer import (QuantConfig, QuantizedModel, QuantizerParams,
                        init_scale_minmax, init_scale_mse, quantize_dequantize,
                        quantize_model)
from .rng import Rng

__version__ = "0.1.0"
