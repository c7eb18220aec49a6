"""Adversarial attacks and defenses for learned image compression, on a small numpy autodiff."""

__version__ = "0.1.0"

from .config import AttackConfig, ExperimentConfig, Method, Target, TrainingConfig, Variant  # noqa: E402
from .codec import CodecModel, codec_forward, load_checkpoint, rd_loss, save_checkpoint  # noqa: E402
from .attacks import fgsm_attack, gradient_heatmap, pgd_attack, run_attack  # noqa: E402
from .defense import DefenseReport, evaluate_robustness, pgd_train  # noqa: E402
from .metrics import EvalRecord, change_metrics, ms_ssim, psnr, rd_cost_change  # noqa: E402
from .conventional import DctCodecConfig, dct_encode_decode, transfer_attack_eval  # noqa: E402
