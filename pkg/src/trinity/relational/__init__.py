from .binlog import BinlogFile, LogOp, LogRecord, encode_record, read_file, scan
from .engine import (
    Delete,
    Insert,
    RelationalEngine,
    Select,
    TxnHandle,
    TxnState,
    Update,
    pk_key,
    row_key,
    statement_from_doc,
)

__all__ = [
    "BinlogFile", "LogOp", "LogRecord", "encode_record", "read_file", "scan",
    "Delete", "Insert", "RelationalEngine", "Select", "TxnHandle", "TxnState",
    "Update", "pk_key", "row_key", "statement_from_doc",
]
