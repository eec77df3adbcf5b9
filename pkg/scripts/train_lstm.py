"""Train the LSTM motion model on a synthetic motion corpus.

Trains on the first sequences of the corpus, evaluates next-twist error on the
held-out ones against a constant-velocity baseline and saves the network.
"""

import argparse
import sys

import numpy as np

from capslam.lstm import TrainConfig, config_dict, lstm_train, make_dataset, save_network
from capslam.sim.trajectory import motion_corpus


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--kind", default="sinusoidal")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--train", type=int, default=10, help="number of training sequences")
    ap.add_argument("--window", type=int, default=10)
    ap.add_argument("--epochs", type=int, default=300)
    ap.add_argument("--hidden", type=int, default=32)
    ap.add_argument("--out", default="lstm_model.bin")
    args = ap.parse_args(argv)
    corpus = motion_corpus(args.kind, args.seed)
    X, Y = make_dataset(corpus[: args.train], window=args.window, stride=2)
    Xt, Yt = make_dataset(corpus[args.train:], window=args.window)
    cfg = TrainConfig(epochs=args.epochs, hidden=args.hidden, dropout=0.0, skip=True, patience=40,
                      learning_rate=1e-2, seed=args.seed)
    res = lstm_train(X, Y, cfg)
    e_lstm = np.sqrt(np.mean(np.sum((res.net.predict_twist(Xt) - Yt)[:, 3:] ** 2, axis=1)))
    e_cv = np.sqrt(np.mean(np.sum((Xt[:, -1] - Yt)[:, 3:] ** 2, axis=1)))
    save_network(args.out, res.net, config_dict(cfg))
    print(f"train windows {len(X)}, test windows {len(Xt)}")
    print(f"translational twist RMSE: lstm {e_lstm:.5f}, constant velocity {e_cv:.5f}")
    print(f"saved {args.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
