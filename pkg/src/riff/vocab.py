"""Shared token-id conventions.

Ids 0..3 are reserved scaffold tokens; everything from FIRST_CONTENT_ID up is
ordinary content. Tiny enumeration configs may reuse ids 1..3 as content; the
scaffold meanings only matter once task templates come into play.
"""

EOS = 0
BOS = 1
MASK = 2
SEP = 3
FIRST_CONTENT_ID = 4


def is_scaffold(token_id: int) -> bool:
    return 0 <= token_id < FIRST_CONTENT_ID
