"""
trustsync source package.
"""
from .core import RunConfig, PreprocessConfig, WCCParams, get_config
from .session import Session, Subject, TrustClass, load_session, binarize_trust
from .pursuit import build_dictionary, matching_pursuit, information_loss
from .warping import AlignmentConstraints, WarpingPath, dtw_align, ddtw_align, wp_meddev, session_sync_features
from .baselines import wcc_duration, emd_1d
from .prediction import FeatureMatrix, fit_elastic_net, repeated_cv, grid_search
from .controls import SynthSpec, generate_synthetic_sessions, shuffle_pairs, shuffle_time_series

__all__ = [
    'RunConfig',
    'PreprocessConfig',
    'WCCParams',
    'get_config',
    'Session',
    'Subject',
    'TrustClass',
    'load_session',
    'binarize_trust',
    'build_dictionary',
    'matching_pursuit',
    'information_loss',
    'AlignmentConstraints',
    'WarpingPath',
    'dtw_align',
    'ddtw_align',
    'wp_meddev',
    'session_sync_features',
    'wcc_duration',
    'emd_1d',
    'FeatureMatrix',
    'fit_elastic_net',
    'repeated_cv',
    'grid_search',
    'SynthSpec',
    'generate_synthetic_sessions',
    'shuffle_pairs',
    'shuffle_time_series',
]
