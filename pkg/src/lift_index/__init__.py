"""Compound-index advisor trained with deep Q-learning from demonstrations.

Modules:

``querylang``  query AST, JSON form, tokenizer and positional action codec
``workload``   schema and seeded synthetic query generator
``planner``    deterministic cost-based planner standing in for a document DB
``neural``     NumPy Q-network with analytic gradients, Adam, model files
``agent``      DQfD agent (act/observe, replay memories, margin loss)
``demos``      rule-based demonstrations (Full and Partial indexing)
``controller`` pretrain / online / evaluate / serve modes
``cli``        command-line entry point
"""

__version__ = "0.1.0"
