"""Prompt and response text for the three tasks.

The wording is closed-vocabulary: :func:`lexicon_corpus` returns every string
the builders can emit (modulo coordinates 0-15), which is what the word-level
text tokenizer is built from.
"""

from __future__ import annotations

from typing import Iterable, Sequence

from .gridworld import Action, Cell, Task

IMAGE = "<image>"  # placeholder replaced by an image span

ACTION_TEXT = {
    Action.UP: "Go up.",
    Action.DOWN: "Go down.",
    Action.LEFT: "Go left.",
    Action.RIGHT: "Go right.",
    Action.PICKUP: "Pick up.",
    Action.DROP: "Drop.",
    Action.TOGGLE: "Toggle.",
}

MOVE_DEF = "* Go up/left/down/right: move one grid space in the absolute up/left/down/right direction."

HEADER = {
    Task.MAZE: [
        "Task: Maze Navigation Simulation",
        "Determine the final destination (A, B, C or D) from the starting point (red point) "
        "following the action sequence. The definitions of the actions are as below.",
        MOVE_DEF,
    ],
    Task.MINIBEHAVIOR: [
        "Task: Mini-Behavior Installing the Printer",
        "Determine whether the agent (red triangle) can pick up the printer (printer symbol) on the "
        "floor and place it on the table (brown area) and toggle it on. If not, identify the failure "
        "reason. The definitions of the actions are as below.",
        MOVE_DEF,
        "* Pick up: pick up the printer from the any of the grid next to the agent. If there is no "
        "printer next to the agent, the action fails.",
        "* Drop: drop the printer to the table that is next to the agent. If there is no table next "
        "to the agent, the action fails.",
        "* Toggle: toggle the printer that is on the table and next to the agent.",
        "Return A, B, C or D.",
    ],
    Task.FROZENLAKE: [
        "Task: FrozenLake",
        "Determine whether the agent (elf character) can safely reach the gift following the action "
        "sequence without falling into the holes. If not, identify the failure reason. The "
        "definitions of the actions are as below.",
        MOVE_DEF,
        "Return A, B or C.",
    ],
}

OPTIONS = {
    Task.MAZE: [],
    Task.MINIBEHAVIOR: [
        "A. Action Success.",
        "B. Action Failed: Drop Error.",
        "C. Action Failed: Pick Up Error.",
        "D. Missing Key Objects.",
    ],
    Task.FROZENLAKE: [
        "A. Action Success.",
        "B. Action Failed: Fall into the Hole.",
        "C. Action Failed: Agent Safe but Fail to Reach Destination.",
    ],
}

INITIAL = {Task.MAZE: "Initial maze:", Task.MINIBEHAVIOR: "Initial State:", Task.FROZENLAKE: "Initial State:"}
FINISHED = {
    Task.MAZE: "Action sequence finished.",
    Task.MINIBEHAVIOR: "Action sequence stopped.",
    Task.FROZENLAKE: "Action sequence stopped.",
}


def coord(c: Cell | None) -> str:
    return "None" if c is None else f"[{c[0]}, {c[1]}]"


def coord_list(cells: Iterable[Cell]) -> str:
    return "[" + ", ".join(coord(c) for c in cells) + "]"


def carrying(flag: bool) -> str:
    return "Carrying objects: printer_0." if flag else "Carrying objects: None."


def prompt_parts(task: Task, actions: Sequence[Action]) -> list[str]:
    """Prompt as text chunks; the chunk ``IMAGE`` marks the initial image."""
    task = Task(task)
    parts = list(HEADER[task])
    parts.append("Full Action Sequence: " + " ".join(ACTION_TEXT[a] for a in actions))
    parts += OPTIONS[task]
    parts += [INITIAL[task], IMAGE]
    if task is Task.MINIBEHAVIOR:
        parts.append(carrying(False))
    parts.append("Response:")
    return parts


def answer(letter: str) -> str:
    return f"The answer is {letter}."


def lexicon_corpus() -> list[str]:
    out: list[str] = []
    for task in Task:
        out += HEADER[task] + OPTIONS[task] + [INITIAL[task], FINISHED[task], "Full Action Sequence:"]
    out += list(ACTION_TEXT.values())
    out += [
        "Response:",
        carrying(True),
        carrying(False),
        "Destination Coordinates: A Coordinate: B Coordinate: C Coordinate: D Coordinate:",
        "Initial Agent Coordinate: Agent Coordinate:",
        "Initial Environment Layout: Printer Initial Coordinate: None. Table Coordinates:",
        "Holes Coordinate: Gift Coordinate:",
        "[[0, 0]].",
        "The answer is A. B. C. D.",
    ]
    out.append(" ".join(str(i) for i in range(16)))
    return out
