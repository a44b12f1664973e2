"""Heart-sound abnormality detection with an H-infinity modified CNN-LSTM."""

from .data_io import (DataError, DataValidationError, DatasetManifest, ManifestEntry, SyntheticSpec,
                      aggregate_recording, ingest_directory, load_wav, patient_split,
                      synthesize_dataset, write_wav)
from .features_mel import MelConfig, MelSpectrogram, log_mel, stft_power
from .model import HInfCnnLstm, ModelConfig, shape_report, transfer_and_freeze
from .pipeline import ClipSet, DspConfig, build_clipset
from .signal_dsp import (Waveform, apply_iir_zero_phase, design_butterworth_lowpass, dwt_decompose,
                         idwt_reconstruct, preprocess_recording, segment_fixed, wavelet_denoise)

__version__ = "0.1.0"
