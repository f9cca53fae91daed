#!/usr/bin/env python3
"""Regenerates the bundled graph fixtures.

    python3 fixtures/generate.py

Writes lwop.graph.json, openpose_vgg.graph.json and toy_pose.graph.json next
to this script. The output is deterministic; the files are checked in, so
this only needs rerunning when the topologies change.
"""

import json
import os

HERE = os.path.dirname(os.path.abspath(__file__))


class Builder:
    def __init__(self, name, in_shape):
        self.name = name
        self.inputs = [{"name": "image", "shape": list(in_shape)}]
        self.nodes = []
        self.channels = {"image": in_shape[0]}

    def conv(self, nid, src, out, k=3, stride=1, pad=None, dil=1, groups=1,
             bias=True, tag="Backbone"):
        if pad is None:
            pad = dil * (k - 1) // 2
        cin = self.channels[src]
        self.nodes.append({
            "id": nid,
            "op": "Conv2d",
            "attrs": {
                "kernel_h": k, "kernel_w": k, "stride": stride,
                "padding": pad, "dilation": dil,
                "in_channels": cin, "out_channels": out,
                "groups": groups, "has_bias": bias,
            },
            "inputs": [src],
            "block_tag": tag,
        })
        self.channels[nid] = out
        return nid

    def act(self, nid, src, fn="relu", tag="Backbone"):
        self.nodes.append({"id": nid, "op": "Activation", "attrs": {"fn": fn},
                           "inputs": [src], "block_tag": tag})
        self.channels[nid] = self.channels[src]
        return nid

    def add(self, nid, srcs, tag):
        self.nodes.append({"id": nid, "op": "Add", "attrs": {},
                           "inputs": list(srcs), "block_tag": tag})
        self.channels[nid] = self.channels[srcs[0]]
        return nid

    def concat(self, nid, srcs, tag):
        self.nodes.append({"id": nid, "op": "Concat", "attrs": {},
                           "inputs": list(srcs), "block_tag": tag})
        self.channels[nid] = sum(self.channels[s] for s in srcs)
        return nid

    def maxpool(self, nid, src, k=2, s=2, p=0, tag="Backbone"):
        self.nodes.append({"id": nid, "op": "MaxPool",
                           "attrs": {"kernel": k, "stride": s, "padding": p},
                           "inputs": [src], "block_tag": tag})
        self.channels[nid] = self.channels[src]
        return nid

    def upsample(self, nid, src, scale, mode, tag):
        self.nodes.append({"id": nid, "op": "Upsample",
                           "attrs": {"scale": scale, "mode": mode},
                           "inputs": [src], "block_tag": tag})
        self.channels[nid] = self.channels[src]
        return nid

    def conv_act(self, nid, src, out, fn="relu", **kw):
        c = self.conv(nid, src, out, **kw)
        return self.act(nid + "_act", c, fn, tag=kw.get("tag", "Backbone"))

    def doc(self, outputs):
        return {"name": self.name, "inputs": self.inputs,
                "nodes": self.nodes, "outputs": outputs}


def lwop():
    """Lightweight OpenPose: MobileNet-v1 trunk to stride 8, CPM,
    initial stage, one refinement stage. BatchNorm is folded away; ELU in
    the CPM trunk is modelled as relu (ELU is not in the operator set)."""
    b = Builder("lightweight_openpose", (3, 368, 368))
    x = b.conv_act("conv1", "image", 32, stride=2, bias=False)

    def conv_dw(name, src, out, stride=1, dil=1, tag="Backbone", fn="relu"):
        cin = b.channels[src]
        d = b.conv_act(name + "_dw", src, cin, fn=fn, stride=stride, dil=dil,
                       groups=cin, bias=False, tag=tag)
        return b.conv_act(name + "_pw", d, out, fn=fn, k=1, bias=False, tag=tag)

    x = conv_dw("conv2", x, 64)
    x = conv_dw("conv3", x, 128, stride=2)
    x = conv_dw("conv4", x, 128)
    x = conv_dw("conv5", x, 256, stride=2)
    x = conv_dw("conv6", x, 256)
    x = conv_dw("conv4_2", x, 512)
    x = conv_dw("conv5_1", x, 512, dil=2)
    for i in range(2, 6):
        x = conv_dw("conv5_%d" % i, x, 512)

    # CPM: align 1x1, three depthwise-separable blocks, residual, 3x3.
    align = b.conv_act("cpm_align", x, 128, k=1, tag="InitialStage")
    t = align
    for i in range(3):
        t = conv_dw("cpm_trunk%d" % i, t, 128, tag="InitialStage")
    s = b.add("cpm_sum", [align, t], "InitialStage")
    feats = b.conv_act("cpm_conv", s, 128, tag="InitialStage")

    # Initial stage.
    t = feats
    for i in range(3):
        t = b.conv_act("init_trunk%d" % i, t, 128, tag="InitialStage")
    h = b.conv_act("init_hm0", t, 512, k=1, tag="HeatmapBranch")
    hm = b.conv("init_hm1", h, 19, k=1, tag="HeatmapBranch")
    p = b.conv_act("init_paf0", t, 512, k=1, tag="PafBranch")
    paf = b.conv("init_paf1", p, 38, k=1, tag="PafBranch")

    # Refinement stage 1.
    x = b.concat("ref1_in", [feats, hm, paf], "Other")
    for i in range(5):
        ini = b.conv_act("ref1_b%d_init" % i, x, 128, k=1, tag="Other")
        t = b.conv_act("ref1_b%d_t0" % i, ini, 128, bias=False, tag="Other")
        t = b.conv_act("ref1_b%d_t1" % i, t, 128, dil=2, bias=False,
                       tag="Other")
        x = b.add("ref1_b%d_sum" % i, [ini, t], "Other")
    h = b.conv_act("ref1_hm0", x, 128, k=1, tag="HeatmapBranch")
    hm2 = b.conv("ref1_hm1", h, 19, k=1, tag="HeatmapBranch")
    p = b.conv_act("ref1_paf0", x, 128, k=1, tag="PafBranch")
    paf2 = b.conv("ref1_paf1", p, 38, k=1, tag="PafBranch")
    return b.doc([hm, paf, hm2, paf2])


def openpose_vgg(stages=6):
    """Original OpenPose (CMU, 2017 two-branch): VGG-19 to conv4_2, two CPM
    convs, a 3x3 initial stage and refinement stages of 7x7 convs."""
    b = Builder("openpose_vgg19", (3, 368, 368))
    x = "image"
    plan = [("conv1_1", 64), ("conv1_2", 64), "pool1",
            ("conv2_1", 128), ("conv2_2", 128), "pool2",
            ("conv3_1", 256), ("conv3_2", 256), ("conv3_3", 256),
            ("conv3_4", 256), "pool3",
            ("conv4_1", 512), ("conv4_2", 512)]
    for item in plan:
        if isinstance(item, str):
            x = b.maxpool(item, x)
        else:
            x = b.conv_act(item[0], x, item[1])
    x = b.conv_act("conv4_3_cpm", x, 256, tag="InitialStage")
    feats = b.conv_act("conv4_4_cpm", x, 128, tag="InitialStage")

    outs = []
    paf, hm = None, None
    for s in range(1, stages + 1):
        if s == 1:
            src, k, n, mid = feats, 3, 3, 512
        else:
            src = b.concat("stage%d_in" % s, [paf, hm, feats], "Other")
            k, n, mid = 7, 5, 128
        branches = []
        for br, tag, nout in (("L1", "PafBranch", 38),
                              ("L2", "HeatmapBranch", 19)):
            t = src
            for i in range(1, n + 1):
                t = b.conv_act("Mconv%d_stage%d_%s" % (i, s, br), t, 128, k=k,
                               tag=tag)
            t = b.conv_act("Mconv%d_stage%d_%s" % (n + 1, s, br), t, mid, k=1,
                           tag=tag)
            o = b.conv("Mconv%d_stage%d_%s" % (n + 2, s, br), t, nout, k=1,
                       tag=tag)
            branches.append(o)
        paf, hm = branches
    outs = [paf, hm]
    return b.doc(outs)


def toy_pose():
    """Small four-block pose network used by executor-backed tests. It has
    one of each operator the rewrites target: a 5x5 conv, a dilated conv
    and swish activations."""
    b = Builder("toy_pose", (3, 32, 32))
    x = b.conv_act("stem", "image", 8, stride=2)
    x = b.conv_act("b1", x, 16, fn="swish")
    x = b.maxpool("pool", x)
    x = b.conv_act("b2", x, 16, k=5)
    f = b.conv_act("cpm", x, 16, dil=2, tag="InitialStage")
    h = b.conv_act("hm0", f, 16, k=1, tag="HeatmapBranch", fn="swish")
    h = b.conv("hm1", h, 5, k=1, tag="HeatmapBranch")
    hu = b.upsample("hm_up", h, 2, "bilinear", "HeatmapBranch")
    p = b.conv_act("paf0", f, 16, k=1, tag="PafBranch")
    p = b.conv("paf1", p, 8, k=1, tag="PafBranch")
    pu = b.upsample("paf_up", p, 2, "nearest", "PafBranch")
    return b.doc([hu, pu])


def write(name, doc):
    with open(os.path.join(HERE, name), "w") as f:
        json.dump(doc, f, indent=2)
        f.write("\n")


if __name__ == "__main__":
    write("lwop.graph.json", lwop())
    write("openpose_vgg.graph.json", openpose_vgg())
    write("toy_pose.graph.json", toy_pose())
