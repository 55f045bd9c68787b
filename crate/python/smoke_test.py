"""Smoke test for the archoscope_py extension.

Build and install first:  pip install --no-build-isolation ./crates/py
"""

import os
import sys
import tempfile

import archoscope_py as ap


def main():
    cnn = ap.Architecture.fixture("mnist_cnn")
    counts = cnn.event_counts()
    assert counts[0]["GemmCall"] == 392, counts[0]
    assert counts[3]["GemmCall"] == 98, counts[3]
    assert cnn.mac_complexity()[0] == (112896, True)
    assert ap.Architecture.from_json(cnn.to_json()) == cnn
    assert ap.solve_stride_padding(32, 10, 5) == (3, 0)

    trace = ap.synth(cnn, seed=1)
    assert trace.sample_rate == 200e6
    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "cnn.emt")
        trace.save(path)
        trace = ap.Trace.load(path)

    segments = ap.split_layers(trace)
    assert len(segments) == len(cnn), segments

    report = ap.extract(trace, 28, 1)
    assert report.resolved, report.layers()
    assert report.recovered.diff(cnn) == []

    quiet = ap.Trace(200e6, [0.0] * 4096)
    frames, freqs = ap.spectrogram(quiet, 256, 128)
    assert len(freqs) == 129 and all(v == 0 for f in frames for v in f)

    noisy = ap.synth(ap.Architecture.fixture("mnist_mlp"), seed=3, noise=2.0, average=1)
    assert not ap.extract(noisy, 28, 1).resolved

    try:
        ap.Architecture.fixture("resnet")
    except ValueError:
        pass
    else:
        raise AssertionError("unknown fixture accepted")

    print("smoke test passed: %d layers recovered, snr %.1f" % (len(report.layers()), report.snr))
    return 0


if __name__ == "__main__":
    sys.exit(main())
