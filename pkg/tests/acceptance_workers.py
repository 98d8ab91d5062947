"""Process-pool worker for the training-backed acceptance criteria.

Each job trains one model configuration on the shared synthetic dataset.
Runs are fully independent, so executing them two at a time changes wall
time only; every result is bit-identical to a sequential run.
"""

import os


def run_training(job):
    os.environ["SEPKERN_THREADS"] = "1"

    from sepkern.dataset import synth_dataset
    from sepkern.net import KPNet, KPNetConfig
    from sepkern.training import LossConfig, TrainConfig, train

    dataset = synth_dataset(**job["dataset"])
    net = KPNet.init(KPNetConfig(**job["net"]), job["seed"])
    tc = TrainConfig(seed=job["seed"],
                     kernel_normalization=job["kernel_normalization"],
                     **job["train"])
    net, curve = train(net, dataset, tc, LossConfig(job.get("mode", "l1")),
                       stop_when_loss_below=job.get("stop_when_loss_below"))
    return {"params": net.params, "curve": curve, "seed": job["seed"]}
