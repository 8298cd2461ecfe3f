#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"
#include "pcstyle/image.hpp"
#include "pcstyle/scene.hpp"
#include "pcstyle/text_style.hpp"

namespace pcstyle {

/// Mean over images and random crops of cos(E_I(crop), text). Crops are patch_size x patch_size
/// (clamped to the image) and resized to the embedder input.
double clip_score(const std::vector<Image>& images, const Tensor& text_embedding, const JointEmbedder& embedder,
                  int n_crops = 64, int patch_size = 96, std::uint64_t seed = 0);
/// Text embedding is the template mean of `style_text`.
double clip_score(const std::vector<Image>& images, const std::string& style_text, const JointEmbedder& embedder,
                  const std::vector<std::string>& templates, int n_crops = 64, int patch_size = 96, std::uint64_t seed = 0);

/// Mean over index-aligned pairs of 1 - cos(E_I(a_k), E_I(b_k)).
double style_separation(const std::vector<Image>& a, const std::vector<Image>& b, const JointEmbedder& embedder);

struct Correspondence {
    int xi, yi;  // pixel in view i
    int xj, yj;  // pixel in view j
};

struct ConsistencyPair {
    int height = 0, width = 0;  // size of view i
    std::vector<Correspondence> matches;
    std::vector<std::uint8_t> valid;  // per pixel of view i
};

/// Every valid-depth pixel of view i is lifted, projected into view j and rounded to the
/// nearest pixel; it is kept when it lands in frame in front of the camera and view j's depth
/// there agrees with the projected depth within `tolerance` (relative).
ConsistencyPair build_correspondence(const CameraView& view_i, const CameraView& view_j, double tolerance = 0.01);

/// RMSE of RGB differences over the matches, in [0, 1] units. NaN when there are none.
double pair_rmse(const Image& frame_i, const Image& frame_j, const ConsistencyPair& pair);

struct ConsistencyReport {
    double rmse = 0.0;
    int pairs_used = 0;
    std::vector<double> per_pair;  // NaN for skipped pairs
};

/// Frames t - stride and t, for every t >= stride, compared through the cameras' geometry;
/// pairs without correspondences are skipped and the rest averaged.
ConsistencyReport consistency_rmse(const std::vector<Image>& frames, const std::vector<CameraView>& cameras, int stride,
                                   double tolerance = 0.01);

}  // namespace pcstyle
