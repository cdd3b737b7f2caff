#pragma once

// Anchored unsigned distance functions: exact mesh oracles, training-sample
// generation, anchor targets, a reverse-mode autodiff engine, the anchored
// distance model, staged training, dense surface extraction and evaluation
// metrics. Everything operates in the normalized frame produced by
// normalize_mesh (longest bounding-box edge = 1).

#include "anchorudf/anchors.hpp"
#include "anchorudf/bvh.hpp"
#include "anchorudf/checkpoint.hpp"
#include "anchorudf/closest_point.hpp"
#include "anchorudf/common.hpp"
#include "anchorudf/extraction.hpp"
#include "anchorudf/losses.hpp"
#include "anchorudf/mesh.hpp"
#include "anchorudf/metrics.hpp"
#include "anchorudf/model.hpp"
#include "anchorudf/optimizer.hpp"
#include "anchorudf/parallel.hpp"
#include "anchorudf/ply.hpp"
#include "anchorudf/rng.hpp"
#include "anchorudf/sampling.hpp"
#include "anchorudf/tape.hpp"
#include "anchorudf/tensor.hpp"
#include "anchorudf/trainer.hpp"
