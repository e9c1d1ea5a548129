"""Entity declarations and the versioned data dictionary.

Information architects describe entities here; the router only ever sees the
compiled :class:`DataDictionary`. Dictionaries are immutable values and every
accepted change yields a new version exactly one higher.
"""

from __future__ import annotations

import json
import re
import threading
from dataclasses import dataclass, field
from enum import Enum
from types import MappingProxyType
from typing import Iterable, Mapping

from .errors import (
    DestructiveChange,
    DuplicateEntity,
    MissingPremiseEndpoint,
    UnknownEntity,
    ValidationFailed,
)
from .values import Scalar

IDENTIFIER = re.compile(r"[A-Za-z_][A-Za-z0-9_]*\Z")


class Kind(str, Enum):
    STRUCTURED = "Structured"
    SEMI_STRUCTURED = "SemiStructured"
    UNSTRUCTURED = "Unstructured"


class Variant(str, Enum):
    DOCUMENT = "Document"
    KEY_VALUE = "KeyValue"
    GRAPH = "Graph"
    SPATIAL_TEMPORAL = "SpatialTemporal"


class Cardinality(str, Enum):
    ONE_TO_ONE = "OneToOne"
    ONE_TO_MANY = "OneToMany"
    MANY_TO_MANY = "ManyToMany"


class CrudOp(str, Enum):
    CREATE = "Create"
    RETRIEVE = "Retrieve"
    UPDATE = "Update"
    DELETE = "Delete"


class Placement(str, Enum):
    PUBLIC_CLOUD = "PublicCloud"
    TENANT_PREMISE = "TenantPremise"


class EngineKind(str, Enum):
    RELATIONAL = "Relational"
    DOCUMENT = "DocumentStore"
    KEY_VALUE = "KeyValueStore"
    GRAPH = "GraphStore"
    SPATIAL_TEMPORAL = "SpatialTemporalStore"


ALL_OPS = frozenset(CrudOp)


@dataclass(frozen=True)
class DataClass:
    kind: Kind
    variant: Variant | None = None

    def __post_init__(self):
        if self.kind is Kind.SEMI_STRUCTURED and self.variant is None:
            object.__setattr__(self, "variant", Variant.DOCUMENT)


@dataclass(frozen=True)
class FieldDef:
    name: str
    scalar: Scalar
    nullable: bool = False


@dataclass(frozen=True)
class Relationship:
    name: str
    from_entity: str
    to_entity: str
    cardinality: Cardinality = Cardinality.ONE_TO_MANY
    key_fields: tuple[str, ...] = ()


@dataclass(frozen=True)
class EntitySchema:
    entity: str
    data_class: DataClass
    fields: tuple[FieldDef, ...] = ()
    primary_key: tuple[str, ...] = ()
    relationships: tuple[Relationship, ...] = ()
    acid_required: bool = False
    allowed_ops: frozenset = ALL_OPS
    placement: Placement = Placement.PUBLIC_CLOUD

    def field(self, name: str) -> FieldDef | None:
        for f in self.fields:
            if f.name == name:
                return f
        return None

    @property
    def structured(self) -> bool:
        return self.data_class.kind is Kind.STRUCTURED


@dataclass(frozen=True)
class Violation:
    code: str
    detail: str = ""

    def __str__(self):
        return f"{self.code}: {self.detail}" if self.detail else self.code


def validate_schema(schema: EntitySchema) -> list[Violation]:
    """Every broken invariant of the schema; an empty list means valid."""
    out: list[Violation] = []
    if not IDENTIFIER.match(schema.entity or ""):
        out.append(Violation("InvalidIdentifier", f"entity {schema.entity!r}"))
    dc = schema.data_class
    if dc.kind is Kind.STRUCTURED and dc.variant is not None:
        out.append(Violation("StructuredWithVariant", schema.entity))
    seen: set[str] = set()
    for f in schema.fields:
        if not IDENTIFIER.match(f.name or ""):
            out.append(Violation("InvalidIdentifier", f"field {f.name!r}"))
        if f.name in seen:
            out.append(Violation("DuplicateField", f.name))
        seen.add(f.name)
    if dc.kind is Kind.STRUCTURED:
        if not schema.fields:
            out.append(Violation("MissingFields", schema.entity))
        if not schema.primary_key:
            out.append(Violation("MissingPrimaryKey", schema.entity))
    elif schema.primary_key:
        out.append(Violation("PrimaryKeyOnUnstructured", schema.entity))
    if len(set(schema.primary_key)) != len(schema.primary_key):
        out.append(Violation("DuplicatePrimaryKeyField", schema.entity))
    for name in schema.primary_key:
        f = schema.field(name)
        if f is None:
            out.append(Violation("UnknownPrimaryKeyField", name))
        elif f.nullable:
            out.append(Violation("NullablePrimaryKey", name))
    if schema.acid_required and dc.kind is not Kind.STRUCTURED:
        out.append(Violation("AcidRequiresStructured", schema.entity))
    rel_names: set[str] = set()
    for rel in schema.relationships:
        if not IDENTIFIER.match(rel.name or ""):
            out.append(Violation("InvalidIdentifier", f"relationship {rel.name!r}"))
        if rel.name in rel_names:
            out.append(Violation("DuplicateRelationship", rel.name))
        rel_names.add(rel.name)
        if rel.from_entity != schema.entity:
            out.append(Violation("RelationshipFromMismatch", rel.name))
        if dc.kind is Kind.STRUCTURED and not rel.key_fields:
            out.append(Violation("MissingKeyFields", rel.name))
        for k in rel.key_fields:
            f = schema.field(k)
            if f is None:
                out.append(Violation("UnknownKeyField", f"{rel.name}.{k}"))
            elif f.nullable:
                out.append(Violation("NullableKeyField", f"{rel.name}.{k}"))
    bad_ops = [op for op in schema.allowed_ops if not isinstance(op, CrudOp)]
    if bad_ops:
        out.append(Violation("UnknownOperation", ",".join(map(str, bad_ops))))
    return out


def classify(schema: EntitySchema) -> EngineKind:
    dc = schema.data_class
    if dc.kind is Kind.STRUCTURED:
        return EngineKind.RELATIONAL
    return {
        Variant.DOCUMENT: EngineKind.DOCUMENT,
        Variant.KEY_VALUE: EngineKind.KEY_VALUE,
        Variant.GRAPH: EngineKind.GRAPH,
        Variant.SPATIAL_TEMPORAL: EngineKind.SPATIAL_TEMPORAL,
        None: EngineKind.DOCUMENT,
    }[dc.variant]


@dataclass(frozen=True)
class DataDictionary:
    version: int = 0
    entities: Mapping[str, EntitySchema] = field(default_factory=lambda: MappingProxyType({}))
    engine_binding: Mapping[str, EngineKind] = field(default_factory=lambda: MappingProxyType({}))

    def schema(self, entity: str) -> EntitySchema:
        try:
            return self.entities[entity]
        except KeyError:
            raise UnknownEntity(entity) from None

    def binding(self, entity: str) -> EngineKind:
        try:
            return self.engine_binding[entity]
        except KeyError:
            raise UnknownEntity(entity) from None

    def _with(self, schema: EntitySchema) -> DataDictionary:
        entities = dict(self.entities)
        entities[schema.entity] = schema
        binding = dict(self.engine_binding)
        binding[schema.entity] = classify(schema)
        return DataDictionary(self.version + 1, MappingProxyType(entities), MappingProxyType(binding))


def _dictionary_violations(d: DataDictionary, schema: EntitySchema) -> list[Violation]:
    out = []
    for rel in schema.relationships:
        if rel.to_entity != schema.entity and rel.to_entity not in d.entities:
            out.append(Violation("UnknownRelationshipTarget", f"{rel.name} -> {rel.to_entity}"))
    return out


def define_schema(d: DataDictionary, schema: EntitySchema) -> DataDictionary:
    if schema.entity in d.entities:
        raise DuplicateEntity(schema.entity)
    violations = validate_schema(schema) + _dictionary_violations(d, schema)
    if violations:
        raise ValidationFailed(violations)
    return d._with(schema)


def evolve_schema(d: DataDictionary, schema: EntitySchema) -> DataDictionary:
    """Additive change to a registered entity: new nullable fields, new
    relationships, changed ops or placement. Anything else is refused."""
    old = d.schema(schema.entity)
    violations = validate_schema(schema) + _dictionary_violations(d, schema)
    if violations:
        raise ValidationFailed(violations)
    if schema.data_class != old.data_class:
        raise DestructiveChange("data class changed")
    if schema.primary_key != old.primary_key:
        raise DestructiveChange("primary key changed")
    if schema.fields[:len(old.fields)] != old.fields:
        raise DestructiveChange("existing fields altered or removed")
    for f in schema.fields[len(old.fields):]:
        if not f.nullable:
            raise DestructiveChange(f"new field {f.name} must be nullable")
    new_rels = {r.name: r for r in schema.relationships}
    for r in old.relationships:
        if new_rels.get(r.name) != r:
            raise DestructiveChange(f"relationship {r.name} altered or removed")
    if schema == old:
        return d
    return d._with(schema)


@dataclass(frozen=True)
class TenantConfig:
    tenant_id: str
    placement_overrides: Mapping[str, Placement] = field(default_factory=dict)
    premise_endpoint: str | None = None


@dataclass(frozen=True)
class PlacementTarget:
    placement: Placement
    endpoint: str | None = None


PUBLIC = PlacementTarget(Placement.PUBLIC_CLOUD)


def resolve_placement(schema: EntitySchema, tenant: TenantConfig | None) -> PlacementTarget:
    placement = schema.placement
    if tenant is not None:
        placement = tenant.placement_overrides.get(schema.entity, placement)
    if placement is Placement.PUBLIC_CLOUD:
        return PUBLIC
    if tenant is None or not tenant.premise_endpoint:
        raise MissingPremiseEndpoint(schema.entity)
    return PlacementTarget(Placement.TENANT_PREMISE, tenant.premise_endpoint)


class Catalog:
    """Holder publishing dictionary versions atomically to concurrent readers."""

    def __init__(self, dictionary: DataDictionary | None = None):
        self._lock = threading.Lock()
        self._current = dictionary or DataDictionary()

    @property
    def current(self) -> DataDictionary:
        return self._current

    def apply(self, schema: EntitySchema) -> DataDictionary:
        with self._lock:
            d = self._current
            if schema.entity in d.entities:
                d = evolve_schema(d, schema)
            else:
                d = define_schema(d, schema)
            self._current = d
            return d


# -- document form ------------------------------------------------------------

def schema_from_doc(doc: dict) -> EntitySchema:
    entity = doc["entity"]
    variant = doc.get("variant")
    dc = DataClass(Kind(doc.get("kind", "Structured")), Variant(variant) if variant else None)
    fields = tuple(
        FieldDef(f["name"], Scalar(f["scalar"]), bool(f.get("nullable", False)))
        for f in doc.get("fields", ())
    )
    rels = tuple(
        Relationship(
            r["name"],
            r.get("from", entity),
            r["to"],
            Cardinality(r.get("cardinality", "OneToMany")),
            tuple(r.get("key_fields", ())),
        )
        for r in doc.get("relationships", ())
    )
    ops = doc.get("allowed_ops")
    return EntitySchema(
        entity=entity,
        data_class=dc,
        fields=fields,
        primary_key=tuple(doc.get("primary_key", ())),
        relationships=rels,
        acid_required=bool(doc.get("acid_required", False)),
        allowed_ops=ALL_OPS if ops is None else frozenset(CrudOp(o) for o in ops),
        placement=Placement(doc.get("placement", "PublicCloud")),
    )


def schema_to_doc(schema: EntitySchema) -> dict:
    dc = schema.data_class
    return {
        "entity": schema.entity,
        "kind": dc.kind.value,
        "variant": dc.variant.value if dc.variant else None,
        "fields": [{"name": f.name, "scalar": f.scalar.value, "nullable": f.nullable} for f in schema.fields],
        "primary_key": list(schema.primary_key),
        "relationships": [
            {"name": r.name, "from": r.from_entity, "to": r.to_entity,
             "cardinality": r.cardinality.value, "key_fields": list(r.key_fields)}
            for r in schema.relationships
        ],
        "acid_required": schema.acid_required,
        "allowed_ops": sorted(op.value for op in schema.allowed_ops),
        "placement": schema.placement.value,
    }


def load_schema_file(text: str) -> list[EntitySchema]:
    """One JSON document per non-blank line; ``#`` lines are comments."""
    out = []
    for line in text.splitlines():
        line = line.strip()
        if line and not line.startswith("#"):
            out.append(schema_from_doc(json.loads(line)))
    return out


def compile_dictionary(schemas: Iterable[EntitySchema]) -> DataDictionary:
    d = DataDictionary()
    for s in schemas:
        d = define_schema(d, s)
    return d
