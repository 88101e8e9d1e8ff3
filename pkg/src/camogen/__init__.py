"""camogen: foreground-guided camouflaged image generation at desk scale.

A small latent diffusion pipeline built on an in-package autodiff engine:
stage 1 trains a vector-quantized latent codec, stage 2 trains a conditional
denoiser whose condition integrates retrieved codebook knowledge with the
foreground's own features, under a foreground-weighted denoising loss.
"""

from .autograd import Tensor
from .codec import Codec, CodecConfig, nearest_entries, train_codec
from .conditioning import (ConditionBundle, build_condition,
                           build_foreground_tokens, crop_and_pad,
                           downsample_mask, fafim_integrate,
                           localized_masked_pooling, reconstruct_background,
                           retrieve_background, slic_superpixels)
from .config import RunConfig, config_to_text, load_config, parse_config
from .dataset import (DatasetManifest, ImageSample, load_dataset, load_samples,
                      synth_dataset)
from .diffusion import (Denoiser, DenoiserConfig, LossBreakdown, LossConfig,
                        NoiseSchedule, bgrec_loss, fadl_loss, foreground_weight,
                        forward_diffuse, make_schedule, sample_latent, total_loss)
from .gradcheck import grad_check
from .metrics import (FeatureStats, MetricReport, evaluate_dataset,
                      frechet_proxy, image_features, is_small_object,
                      masked_psnr, masked_ssim, mmd_proxy)
from .optim import Adam
from .params import ParamStore
from .pipeline import (TrainState, evaluate_run, generate_image, make_sample,
                       prepare_static, run_ablation, run_stage1, run_stage2,
                       run_training)
from .rng import Rng, name_seed

__version__ = "0.1.0"
