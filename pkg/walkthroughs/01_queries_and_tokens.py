"""
Queries, tokens and index actions
=================================

How a query becomes an agent state, and how an agent action becomes a
compound index.
"""

# %%
# A query is a small AST: predicates joined by logical operators, plus an
# aggregation (count, limit, or sort-then-limit).
from lift_index.querylang import (
    Aggregation,
    Logical,
    Predicate,
    Query,
    build_vocabulary,
    decode_action,
    dumps_query,
    encode_action,
    extract_attributes,
    format_query,
    index,
    tokenize,
)

q = Query(
    Logical("$and", (Predicate("$eq", "name", "Jane"), Predicate("$gt", "age", 30))),
    Aggregation.sort_then_limit([("age", "desc")], 10),
)
print(format_query(q))
print(dumps_query(q))  # Mongo-style JSON, the on-disk form

# %%
# The vocabulary holds reserved tokens, operator tokens and one token per
# schema field.  Literals never enter the state.
vocab = build_vocabulary(["name", "age"])
print(len(vocab), vocab.tokens)

# %%
# Existing indexes show up as IDX_ASC / IDX_DESC markers after the field that
# leads the index.
state = tokenize(q, [index(("name", "asc"))], vocab, length=16)
print(vocab.decode(state.ids))

# %%
# Actions are positional: head value v >= 1 picks attribute ceil(v/2) of
# the query, odd values ascending, even values descending, 0 is a no-op.
attrs = extract_attributes(q)
print(attrs)
print(decode_action([3, 0], attrs))            # ascending index on age
print(decode_action([4, 1, 0], attrs))         # (age desc, name asc)
print(encode_action(index(("age", "desc"), ("name", "asc")), attrs, k=3))
print(decode_action([0, 0, 0], attrs))         # no index at all
