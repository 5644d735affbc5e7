"""Privacy-preserving WiFi indoor localization.

A server holding a secret position HMM decodes a client's location from
encrypted RSSI measurements through secure two-party computation: the server
never sees measurements or positions, the client never sees the model.
"""

from .fixedpoint import (
    DEFAULT_PARAMS,
    EncodingRangeError,
    FixedPointParams,
    fp_decode,
    fp_encode,
)
from .paillier import (
    Ciphertext,
    CryptoError,
    PrivateKey,
    PublicKey,
    add,
    add_plain,
    generate_keypair,
    load_key_file,
    rerandomize,
    save_key_file,
    scalar_mul,
    sub,
)
from .hmm import (
    DecodeResult,
    HmmModel,
    ModelError,
    Observation,
    StateMeta,
    emission_cost_plain,
    load_model,
    neg_log_cost,
    save_model,
    viterbi_plain,
)
from .stpc import (
    BlindingAudit,
    CompareEngine,
    LocalRoundExecutor,
    PairReply,
    PairRequest,
    StpcError,
    answer_compare,
    answer_multiply,
    interactive_multiply,
    min_argmin_tournament,
    min_tournament,
    run_tournaments,
)
from .wire import (
    ConnectionClosedError,
    FrameDecodeError,
    MessageType,
    ProtocolError,
    TrafficStats,
    Transport,
    decode_frame,
    encode_frame,
    measure_transcript,
)
from .server import EncryptedObservation, LocalizationServer, ServerSession
from .client import ClientError, LocalizationClient, PositionRecord
from .sim import (
    FloorPlan,
    GroundTruthTrace,
    MovementParams,
    RadioParams,
    SimError,
    build_model,
    evaluate_accuracy,
    generate_trace,
    generate_world,
)
from .bench import BenchConfig, BenchReport, bench, run_sweep

__version__ = "0.1.0"
