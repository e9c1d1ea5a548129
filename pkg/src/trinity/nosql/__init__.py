from .engines import (
    CreateCollection,
    DeleteDoc,
    DeleteEdge,
    DeleteNode,
    DocumentCollection,
    GraphStore,
    KeyValueStore,
    KvDelete,
    KvPut,
    MarkApplied,
    NodeStores,
    ResetCollection,
    SpatioTemporalStore,
    StDelete,
    StPut,
    UpsertDoc,
    UpsertEdge,
    UpsertNode,
    op_domain,
    op_entity,
)
from .replica_set import (
    CatchUpPlan,
    FailureDetector,
    MemberState,
    NoSqlNode,
    OplogEntry,
    ReplicaSet,
    ReplicaSetView,
    choose_successor,
    common_prefix,
    heartbeat_tick,
    initial_view,
    promote,
)
