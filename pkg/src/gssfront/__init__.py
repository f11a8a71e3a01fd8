"""Multi-channel far-field speech enhancement front-end.

Localization-driven channel selection, activity-guided CACGMM mask
estimation and mask-based MVDR beamforming, with a free-field scene
simulator for ground-truth evaluation.
"""
from .signal import MultiChannelWave, Spectrogram, StftParams, istft, stft
from .segments import SegmentAnnotation, activity_matrix, read_rttm
from .scene import SceneSpec, SceneTruth, SourceSpec, derive_activities, simulate
from .gss import GssConfig, MaskSet, CacgmmState, cacgmm_em, gss_enhance
from .beamform import (BeamformerWeights, SpatialCovariance, apply_beamformer,
                       mvdr_souden, mvdr_steering, psd_batch, psd_recursive)
from .localization import (ChannelSelection, DoaEstimate, gcc_phat, localize_sources,
                           select_channel_energy_phase, select_channel_max_snr, srp_map)
from .metrics import EvalReport, si_sdr, snr_gain

__version__ = "0.1.0"
