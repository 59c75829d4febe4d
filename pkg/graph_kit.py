# graph_kit.py - message-passing kit shared by variable and factor nodes
from dataclasses import dataclass
from typing import Any, Mapping


@dataclass(frozen=True)
class Message:
    """Message travelling along one directed edge of a factor graph."""
    source: str
    target: str
    payload: Any


class Node:
    """Base node class."""
    kind = "node"

    def __init__(self, id: str):
        self.id = id

    def process(self, inbox: Mapping[str, Message], target: str, **context) -> Message:
        """Combine the messages received from every neighbour but ``target`` into the message sent to it."""
        raise NotImplementedError("Subclasses must implement process method")

    def __repr__(self) -> str:
        return f"{self.__class__.__name__}({self.id!r})"
