"""Regenerate the bundled 50-d embedding file (GloVe text format).

Words sharing a semantic group get a shared centroid plus private noise, so
instruction words that mean similar things ("push", "press", "forward") sit
close together the way pretrained vectors would.
"""

import sys

import numpy as np

DIM = 50
GROUPS = {
    "reach": ["reach", "move", "go", "hand", "touch", "approach", "gripper", "arm", "effector", "toward"],
    "push": ["push", "press", "forward", "down", "shove", "sweep", "close", "closed", "shut", "slide", "into"],
    "pull": ["pull", "back", "open", "drag", "draw", "backward", "out"],
    "grasp": ["pick", "place", "grab", "grasp", "lift", "put", "hold", "carry", "drop", "set", "up"],
    "thing": ["object", "button", "door", "drawer", "window", "block", "puck", "cube", "ball", "handle", "lever",
              "shelf", "bin", "peg", "box", "dial", "cup", "mug", "plate", "faucet", "basketball", "hoop"],
    "place": ["goal_pos", "goal", "target", "position", "location", "spot", "point", "there", "here", "destination"],
    "left": ["left", "west"],
    "right": ["right", "east"],
    "func": ["to", "the", "a", "an", "at", "and", "of", "on", "in", "it", "with", "from", "onto", "then", "please",
             "now", "your", "this", "that", "is", "be", "over", "under", "near", "by", "for", "as", "so"],
}
FILLER = """time year people way day man thing woman life child world school state family student group
country problem part case week company system program question work government number night home water
room mother area money story fact month lot study book eye job word business issue side kind head house
service friend father power hour game line end member law car city community name president team minute
idea kid body information nothing ago lead social understand whether watch together follow around parent
stop face anything create public already speak others read level allow add office spend door health person
art sure such war history party within grow result morning walk reason low win research girl guy early food
before moment himself air teacher force offer enough both education across although remember foot second boy
maybe toward able age off policy everything love process music including consider appear actually buy
probably human wait serve market die send expect home sense build stay fall nation plan cut college interest
death course someone experience behind reason table blue red green yellow black white small large big little
long short high fast slow quick gentle careful soft hard light heavy near far first last next other same
different new old good bad great best better top bottom middle center edge corner wall floor surface""".split()


def main(path: str, seed: int = 2024) -> None:
    rng = np.random.default_rng(seed)
    centroids = {g: rng.normal(0.0, 0.55, DIM) for g in GROUPS}
    vectors: dict[str, np.ndarray] = {}
    for group, words in GROUPS.items():
        for w in words:
            if w not in vectors:
                vectors[w] = centroids[group] + rng.normal(0.0, 0.3, DIM)
    for w in FILLER:
        if w not in vectors:
            vectors[w] = rng.normal(0.0, 0.6, DIM)
    with open(path, "w") as fh:
        for w, v in vectors.items():
            fh.write(w + " " + " ".join(f"{x:.5f}" for x in v) + "\n")
    print(f"wrote {len(vectors)} tokens to {path}")


if __name__ == "__main__":
    main(sys.argv[1] if len(sys.argv) > 1 else "src/million/data/glove_desk.50d.txt")
