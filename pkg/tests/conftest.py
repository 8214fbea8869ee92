import random

import pytest

from cinesynth.plot import (
    Character,
    EpochChapter,
    FrameDescription,
    MoviePlot,
    MovieTheme,
    NarrativeThread,
    StyleSpec,
    StyleToken,
)


def build_plot(n_chapters=3, n_threads=2, n_frames=4, movie_id="ab12cd34ef56ab12"):
    """Well-formed plot with a regular chapter/thread/frame grid."""
    characters = [
        Character("Mara Voss", "a weary detective", "Greta Olin"),
        Character("Dr. Halden", "the reclusive founder", "Piet Maren"),
    ]
    chapters = []
    g = 0
    for ci in range(n_chapters):
        threads = []
        for ti in range(n_threads):
            frames = []
            for _ in range(n_frames):
                frames.append(
                    FrameDescription(
                        global_index=g,
                        text=f"Mara Voss inspects clue {g} under flickering lights.",
                        mentioned_characters=["Mara Voss"],
                    )
                )
                g += 1
            threads.append(NarrativeThread(index=ti, summary=f"thread {ti}", frames=frames))
        chapters.append(
            EpochChapter(index=ci, title=f"Chapter {ci}", summary=f"era {ci}", threads=threads)
        )
    return MoviePlot(
        movie_id=movie_id,
        theme=MovieTheme(phrase="a city that forgets overnight", genre_tag="mystery"),
        overview="A detective unravels a city-wide amnesia conspiracy.",
        style=StyleSpec(
            style_name="Neo Noir",
            description="rain-slick streets, hard shadows",
            token=StyleToken("<neo-noir>", "blobs/ab/abcd", "Neo Noir"),
        ),
        characters=characters,
        chapters=chapters,
    )


@pytest.fixture
def plot():
    return build_plot()


@pytest.fixture
def rng():
    return random.Random(20260819)
