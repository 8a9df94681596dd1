"""Simulate Doppler spoofing on an 802.11a-like OFDM link and the
eavesdropper's joint CFO/speed estimator it is meant to fool."""
from .channel import ChannelParams, apply_channel, doppler_for_speed, draw_rician_gain, speed_for_doppler
from .errors import (AliasWarning, ConfigError, DegenerateGeometryError, DesignError, FrameNotDetectedError,
                     NumericalError, SingularInnovationError, SizeError, ToleranceError, UndefinedPhaseError,
                     ValidationError, ZeroPilotError)
from .estimators import (EstimateResult, EstimatorConfig, LmmseState, SubcarrierStatistics, compute_statistic,
                         estimate_speed_pipeline, isolate_subcarrier, lmmse_init, lmmse_update, matched_filter,
                         moose_correct, run_lmmse, solve_joint_ls)
from .harness import BerRecord, ExperimentSpec, run_ber, run_estimation, run_filter_report, run_periodogram
from .ofdm_phy import (C_LIGHT, BasebandSignal, Frame, FrequencyDomainSymbol, OfdmConfig, add_cyclic_prefix,
                       build_frame, build_sts, map_bits_to_qam, ofdm_demodulate, ofdm_modulate, random_frame,
                       receive_payload)
from .spoofer import DsfFilter, SpoofParams, apply_spoof, design_dsf, simple_spoof

__version__ = "0.1.0"
