from .network import (  # noqa: F401
    BlockSpec,
    NetworkSpec,
    Network,
    build_network,
    head_tags,
    load_weights,
    save_weights,
)
