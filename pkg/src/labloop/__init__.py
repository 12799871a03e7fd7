"""Closed-loop research engine.

Agent teams formalize a request, propose structural actions over a finite
action space, assemble code through a cell-by-cell patch protocol, execute it
in a sandboxed workspace, and score the outcome with a composite reward. The
loop keeps an append-only trial history so sessions can be replayed and their
regret accounted for.
"""

__version__ = "0.1.0"
