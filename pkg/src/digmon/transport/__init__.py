"""Topic-based publish/subscribe fabric (QoS 0)."""

from .broker import Broker, BrokerLimits, BrokerThread, run_broker
from .client import Backoff, Client, SubscriptionError
from .frame import (MAX_FRAME, Frame, FrameReader, FrameType, ProtocolError, TruncatedFrame,
                    decode_frame, encode_frame)
from .payload import SAMPLE_SIZE, SamplePayload, pack_sample, unpack_sample
from .topics import TopicError, TopicFilter, topic_match, validate_filter, validate_topic
