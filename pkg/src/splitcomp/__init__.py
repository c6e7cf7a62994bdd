"""Split computing with trainable entropy bottlenecks.

Device-side encoders produce quantized, entropy-coded latents that an
edge-side decoder and task tail turn into predictions; the benchmark
harness measures rate, accuracy, encoder size, and their tradeoffs.
"""

from .bench import (Dataset, SweepSpec, TradeoffRecord, bit_allocation_map,
                    evaluate, load_binary_image_set, pareto_front, sweep,
                    synthetic_dataset)
from .coder import Bitstream, CdfTable, build_cdf_table, decode, encode
from .entropy import (DEFAULT_L, FactorizedPrior, HyperpriorModel, P_MIN,
                      QuantizerMode, SCALE_MIN, probability_mass,
                      quantize_infer, quantize_train)
from .nets import (PLACEMENTS, ReferenceConfig, ReferenceModel, SplitModel,
                   build_reference, inject_bottleneck)
from .runtime import (ChannelModel, Frame, SplitClient, SplitServer,
                      parse_frame, serialize_frame, serve, simulate_channel)
from .tensor import Tensor
from .training import (TeacherHandle, TrainConfig, crbq_quantize, kd_loss,
                       poly_lr, soften, train, train_end_to_end,
                       train_reference, train_two_stage)

__version__ = "1.0.0"
