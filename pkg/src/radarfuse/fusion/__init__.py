from .attention import (
    AttentionInputs,
    EmptyKeysError,
    attention_backward,
    attention_gradcheck,
    attention_weights,
    finite_difference_gradcheck,
    range_adaptive_attention,
    scaled_dot_product_attention,
)
from .layers import (
    DecoderParams,
    QueryState,
    RadarFeatures,
    FrameGeometry,
    aggregate_agent_queries,
    aggregate_ego_query,
    aggregate_map_queries,
    decoder_layer,
    embed_anchors,
    embed_polylines,
    ego_query_init,
    encode_radar_points,
    frustum_cross_attention,
    layer_norm,
    run_decoder,
    temporal_attention,
)
