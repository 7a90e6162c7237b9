#pragma once

// MNIST-format loading, decoy confounder injection, simulated teacher
// feedback of all quality types, and counterexample construction.

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "xiltk/tensor.hpp"

namespace xiltk {

constexpr int kImgH = 28;
constexpr int kImgW = 28;
constexpr int kImgPixels = kImgH * kImgW;

enum class Split { train, test };

struct ImageSet {
  std::vector<uint8_t> images;  // N * 28 * 28
  std::vector<uint8_t> labels;  // N, values 0..9
  Split split = Split::train;

  int64_t size() const { return static_cast<int64_t>(labels.size()); }
  const uint8_t* image(int64_t i) const { return images.data() + i * kImgPixels; }
};

struct ParseError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// IDX ubyte parsing, bit-exact big-endian. Throws ParseError with the
/// file offset on bad magic or truncation.
ImageSet load_idx(const std::string& images_path, const std::string& labels_path,
                  Split split);
void save_idx(const std::string& images_path, const std::string& labels_path,
              const ImageSet& set);

std::vector<uint8_t> load_idx_images(const std::string& path, int64_t* rows = nullptr,
                                     int64_t* cols = nullptr);
std::vector<uint8_t> load_idx_labels(const std::string& path);

// ---------------------------------------------------------------------------

constexpr int kDecoySide = 4;  // 4x4 square, 16 pixels

/// Confounded dataset: every image gets a 4x4 gray square in one of the
/// four corners. On the train split the shade is a deterministic function
/// of the label (255 - 25*label); on the test split it is independent of
/// the label (uniform over {0,25,...,225}).
struct DecoySet {
  ImageSet base;
  std::vector<uint8_t> corner;  // 0=TL 1=TR 2=BL 3=BR
  std::vector<uint8_t> shade;
  uint64_t seed = 0;

  int64_t size() const { return base.size(); }

  /// 28x28 binary mask of the confounder square (exactly 16 ones).
  std::array<uint8_t, kImgPixels> decoy_mask(int64_t i) const;

  /// Base image with the decoy square stamped in.
  std::array<uint8_t, kImgPixels> decoyed_image(int64_t i) const;
};

DecoySet make_decoy(const ImageSet& set, uint64_t seed);

uint8_t train_shade_for_label(uint8_t label);  // 255 - 25*label

// ---------------------------------------------------------------------------

enum class FeedbackQuality { correct, arbitrary, incomplete, empty };
enum class FeedbackSemantics { penalty, reward };

std::string quality_name(FeedbackQuality q);
FeedbackQuality quality_from_name(const std::string& s);

struct FeedbackMask {
  std::vector<uint8_t> mask;  // 784, binary
  FeedbackSemantics semantics = FeedbackSemantics::penalty;
  FeedbackQuality quality = FeedbackQuality::correct;
};

/// Simulated teacher annotations for every image of the decoy set.
/// penalty-correct marks the confounder square; reward-correct marks the
/// digit pixels (original intensity > 0).
std::vector<FeedbackMask> make_feedback(const DecoySet& decoy, FeedbackQuality quality,
                                        FeedbackSemantics semantics);

// ---------------------------------------------------------------------------

enum class CeStrategy { randomize, alternative, substitute };

std::string ce_strategy_name(CeStrategy s);
CeStrategy ce_strategy_from_name(const std::string& s);

struct Counterexample {
  std::array<uint8_t, kImgPixels> image;
  uint8_t label = 0;
  CeStrategy strategy = CeStrategy::randomize;
  int64_t source_index = 0;
};

/// Corrected copies of confounded images: pixels under the feedback mask
/// are randomized / zeroed / substituted from a same-class donor; all
/// other pixels equal the source image exactly.
std::vector<Counterexample> make_counterexamples(const DecoySet& decoy,
                                                 const std::vector<FeedbackMask>& feedback,
                                                 CeStrategy strategy, int copies,
                                                 uint64_t seed);

// ---------------------------------------------------------------------------

struct FeedbackSet {
  std::vector<FeedbackMask> masks;
  std::vector<uint8_t> present;  // per image; empty = all present
  int64_t count_present() const;
};

/// Keep exactly k annotations (uniform without replacement), drop the rest.
FeedbackSet sample_feedback_subset(const std::vector<FeedbackMask>& feedback, int64_t k,
                                   uint64_t seed);

// ---------------------------------------------------------------------------
// Cache: JSON manifest + small binary arrays; images regenerate
// deterministically from (base IDX, seed).

void save_decoy_cache(const std::string& path, const DecoySet& set,
                      const std::string& base_name);
DecoySet load_decoy_cache(const std::string& path, const ImageSet& base);

}  // namespace xiltk
