"""Polyglot persistence middleware.

Structured data lives on sharded relational engines; a change-data-capture
pipeline copies it into NoSQL replica sets that serve analytical reads.
"""

__version__ = "0.1.0"
