"""Smoke test of the Python bindings: synth, tokenise, train, generate, analyse."""

import math
import os
import tempfile

import meg


def main():
    signals = meg.synth_data(subjects=2, channels=2, duration_s=20.0, seed=1)
    assert len(signals) == 2 and signals.fs == 250.0
    subject, session, channels = signals.recording(0)
    assert (subject, session, len(channels), len(channels[0])) == (0, 0, 2, 5000)

    freqs, power = meg.welch(channels, signals.fs)
    assert len(power) == 2 and len(power[0]) == len(freqs)
    alpha = max(range(len(freqs)), key=lambda k: power[0][k])
    print(f"welch peak {freqs[alpha]:.2f} Hz")

    tok = meg.train_tokeniser(signals, vocab=8, epochs=2, batches_per_epoch=5, seed=0)
    labels = tok.tokenise(channels[0][:500])
    assert len(labels) == 500 and max(labels) < tok.k_star
    recon = tok.detokenise(labels)
    assert len(recon) == 500 and all(math.isfinite(v) for v in recon)
    print(f"tokeniser K*={tok.k_star} pve={tok.pve(signals):.1f}%")

    corpus = tok.tokenise_set(signals)
    gpt = meg.train_gpt(corpus, epochs=1, batches_per_epoch=2, seed=0)
    gen = gpt.generate(corpus.frequencies(), steps=50, seed=3)
    assert len(gen) == 2 and len(gen[0]) == 50
    assert gen == gpt.generate(corpus.frequencies(), steps=50, seed=3)

    path, stats = meg.burst_states(channels[0], signals.fs, states=2, n_iter=10)
    assert len(stats) == 2 and set(path) <= {0, 1}

    x = [[float(i % 4 == c) + 0.01 * i for c in range(4)] for i in range(40)]
    y = [i % 4 for i in range(40)]
    clf = meg.Classifier(x, y, lam=0.1)
    assert clf.predict(x) == y

    with tempfile.TemporaryDirectory() as d:
        signals.write(os.path.join(d, "s"))
        back = meg.SignalSet.read(os.path.join(d, "s"))
        assert back.recording(1) == signals.recording(1)
        tok.save(os.path.join(d, "t.megck"))
        assert meg.Tokeniser.load(os.path.join(d, "t.megck")).tokenise(channels[0][:500]) == labels
        try:
            meg.SignalSet.read(os.path.join(d, "missing"))
        except (OSError, ValueError):
            pass
        else:
            raise AssertionError("reading a missing set must fail")
        assert meg.run_cli(["synth-data", "--out", os.path.join(d, "o"), "--bogus"]) == 1
    print("smoke test ok")


if __name__ == "__main__":
    main()
