"""gapcast: encoder-decoder forecasting for gappy time series.

The input window is never imputed. Its available points and its missing
blocks are encoded losslessly as two variable-length streams, one GRU encoder
per stream; decoder variants handle gaps in the forecast horizon itself.
"""

from .benchmark import (ALL_METHODS, BASELINE_METHODS, PROPOSED_METHODS,
                        BenchmarkConfig, EvalReport, benchmark, run_baseline)
from .cells import (GruDParams, GruParams, MaskedInput, compute_delta,
                    compute_mask, grud_backward, grud_input, grud_step,
                    gru_backward, gru_step, init_gru, init_grud, input_decay)
from .codec import (EncodedWindow, Window, compression_stats, decode_window,
                    encode_window, windows_equal)
from .data import (CsvSchema, ForecastExample, MaskingConfig, ScalingProfile,
                   SeriesRecord, apply_scaling, fit_scaling, invert_scaling,
                   load_csv, make_examples, make_synthetic_dataset, mask_stats,
                   select_top_variation, synthetic_mask, total_variation,
                   write_csv)
from .errors import (CodecError, DataError, ExampleRejected, GapcastError,
                     ProtocolError, ShapeError, TrainingDiverged, UsageError)
from .imputation import band_fill, mean_fill
from .metrics import (MapeResult, MaseResult, WelchResult, copy_previous,
                      copy_previous_normalizers, mape, mase, welch_t_test)
from .model import (DecoderVariant, DualEncoderModel, ModelConfig,
                    SingleEncoderConfig, SingleEncoderModel, TrainingConfig,
                    TrainResult, forecast, load_checkpoint, mse_loss,
                    save_checkpoint, train)
from .numerics import (Adam, Optimizer, Param, RMSProp, finite_diff_check,
                       make_optimizer, matvec, sigmoid, uniform_init)

__version__ = "0.1.0"
