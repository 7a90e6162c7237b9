#include "xiltk/datasets.hpp"

#include <cstring>
#include <fstream>
#include <iostream>

#include "xiltk/checkpoint.hpp"
#include "xiltk/rng.hpp"

namespace xiltk {

namespace {

constexpr uint32_t kImagesMagic = 0x00000803;
constexpr uint32_t kLabelsMagic = 0x00000801;

uint32_t read_be32(std::ifstream& in, const std::string& path, size_t offset) {
  unsigned char b[4];
  in.read(reinterpret_cast<char*>(b), 4);
  if (!in.good())
    throw ParseError(path + ": truncated at offset " + std::to_string(offset));
  return (uint32_t(b[0]) << 24) | (uint32_t(b[1]) << 16) | (uint32_t(b[2]) << 8) |
         uint32_t(b[3]);
}

void write_be32(std::ofstream& out, uint32_t v) {
  char b[4] = {char(v >> 24), char(v >> 16), char(v >> 8), char(v)};
  out.write(b, 4);
}

// corner -> (row, col) of the square's top-left pixel
constexpr int kCornerRow[4] = {0, 0, kImgH - kDecoySide, kImgH - kDecoySide};
constexpr int kCornerCol[4] = {0, kImgW - kDecoySide, 0, kImgW - kDecoySide};

}  // namespace

std::vector<uint8_t> load_idx_images(const std::string& path, int64_t* rows,
                                     int64_t* cols) {
  std::ifstream in(path, std::ios::binary);
  if (!in.good()) throw ParseError(path + ": cannot open");
  uint32_t magic = read_be32(in, path, 0);
  if (magic != kImagesMagic)
    throw ParseError(path + ": bad magic 0x" + std::to_string(magic) +
                     " at offset 0, expected image magic 0x00000803");
  uint32_t n = read_be32(in, path, 4);
  uint32_t r = read_be32(in, path, 8);
  uint32_t c = read_be32(in, path, 12);
  if (rows) *rows = r;
  if (cols) *cols = c;
  std::vector<uint8_t> data(size_t(n) * r * c);
  in.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(data.size()));
  if (in.gcount() != static_cast<std::streamsize>(data.size()))
    throw ParseError(path + ": truncated at offset " +
                     std::to_string(16 + in.gcount()) + " (expected " +
                     std::to_string(16 + data.size()) + " bytes)");
  return data;
}

std::vector<uint8_t> load_idx_labels(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in.good()) throw ParseError(path + ": cannot open");
  uint32_t magic = read_be32(in, path, 0);
  if (magic != kLabelsMagic)
    throw ParseError(path + ": bad magic 0x" + std::to_string(magic) +
                     " at offset 0, expected label magic 0x00000801");
  uint32_t n = read_be32(in, path, 4);
  std::vector<uint8_t> data(n);
  in.read(reinterpret_cast<char*>(data.data()), n);
  if (in.gcount() != static_cast<std::streamsize>(n))
    throw ParseError(path + ": truncated at offset " + std::to_string(8 + in.gcount()));
  return data;
}

ImageSet load_idx(const std::string& images_path, const std::string& labels_path,
                  Split split) {
  ImageSet set;
  int64_t r = 0, c = 0;
  set.images = load_idx_images(images_path, &r, &c);
  XILTK_CHECK(r == kImgH && c == kImgW,
              images_path + ": expected 28x28 images, got " + std::to_string(r) + "x" +
                  std::to_string(c));
  set.labels = load_idx_labels(labels_path);
  XILTK_CHECK(set.images.size() == set.labels.size() * size_t(kImgPixels),
              "image/label count mismatch: " + images_path);
  for (auto l : set.labels) XILTK_CHECK(l <= 9, labels_path + ": label out of range");
  set.split = split;
  return set;
}

void save_idx(const std::string& images_path, const std::string& labels_path,
              const ImageSet& set) {
  {
    std::ofstream out(images_path, std::ios::binary);
    XILTK_CHECK(out.good(), images_path + ": cannot open for writing");
    write_be32(out, kImagesMagic);
    write_be32(out, static_cast<uint32_t>(set.size()));
    write_be32(out, kImgH);
    write_be32(out, kImgW);
    out.write(reinterpret_cast<const char*>(set.images.data()),
              static_cast<std::streamsize>(set.images.size()));
  }
  {
    std::ofstream out(labels_path, std::ios::binary);
    XILTK_CHECK(out.good(), labels_path + ": cannot open for writing");
    write_be32(out, kLabelsMagic);
    write_be32(out, static_cast<uint32_t>(set.size()));
    out.write(reinterpret_cast<const char*>(set.labels.data()),
              static_cast<std::streamsize>(set.labels.size()));
  }
}

// ---------------------------------------------------------------------------

uint8_t train_shade_for_label(uint8_t label) {
  return static_cast<uint8_t>(255 - 25 * int(label));
}

DecoySet make_decoy(const ImageSet& set, uint64_t seed) {
  DecoySet d;
  d.base = set;
  d.seed = seed;
  int64_t n = set.size();
  d.corner.resize(n);
  d.shade.resize(n);
  Rng corner_rng = Rng(seed).fork(1);
  Rng shade_rng = Rng(seed).fork(2);
  for (int64_t i = 0; i < n; ++i) {
    d.corner[i] = static_cast<uint8_t>(corner_rng.next_below(4));
    if (set.split == Split::train)
      d.shade[i] = train_shade_for_label(set.labels[i]);
    else
      d.shade[i] = static_cast<uint8_t>(25 * shade_rng.next_below(10));
  }
  return d;
}

std::array<uint8_t, kImgPixels> DecoySet::decoy_mask(int64_t i) const {
  std::array<uint8_t, kImgPixels> m{};
  int r0 = kCornerRow[corner[i]], c0 = kCornerCol[corner[i]];
  for (int r = 0; r < kDecoySide; ++r)
    for (int c = 0; c < kDecoySide; ++c) m[(r0 + r) * kImgW + c0 + c] = 1;
  return m;
}

std::array<uint8_t, kImgPixels> DecoySet::decoyed_image(int64_t i) const {
  std::array<uint8_t, kImgPixels> img;
  std::memcpy(img.data(), base.image(i), kImgPixels);
  int r0 = kCornerRow[corner[i]], c0 = kCornerCol[corner[i]];
  for (int r = 0; r < kDecoySide; ++r)
    for (int c = 0; c < kDecoySide; ++c) img[(r0 + r) * kImgW + c0 + c] = shade[i];
  return img;
}

// ---------------------------------------------------------------------------

std::string quality_name(FeedbackQuality q) {
  switch (q) {
    case FeedbackQuality::correct: return "correct";
    case FeedbackQuality::arbitrary: return "arbitrary";
    case FeedbackQuality::incomplete: return "incomplete";
    case FeedbackQuality::empty: return "empty";
  }
  return "?";
}

FeedbackQuality quality_from_name(const std::string& s) {
  if (s == "correct") return FeedbackQuality::correct;
  if (s == "arbitrary") return FeedbackQuality::arbitrary;
  if (s == "incomplete") return FeedbackQuality::incomplete;
  if (s == "empty") return FeedbackQuality::empty;
  throw TensorError("unknown feedback quality '" + s + "'");
}

namespace {

// 5-wide, 3-tall rectangle centered horizontally in the top or bottom
// border rows: rows {0..2} or {25..27}, cols {11..15}.
void fill_arbitrary_rect(std::vector<uint8_t>& mask, bool top) {
  int r0 = top ? 0 : kImgH - 3;
  for (int r = r0; r < r0 + 3; ++r)
    for (int c = 11; c <= 15; ++c) mask[r * kImgW + c] = 1;
}

bool intersects(const std::vector<uint8_t>& mask,
                const std::array<uint8_t, kImgPixels>& other) {
  for (int p = 0; p < kImgPixels; ++p)
    if (mask[p] && other[p]) return true;
  return false;
}

}  // namespace

std::vector<FeedbackMask> make_feedback(const DecoySet& decoy, FeedbackQuality quality,
                                        FeedbackSemantics semantics) {
  int64_t n = decoy.size();
  std::vector<FeedbackMask> out(n);
  Rng rng = Rng(decoy.seed).fork(3);
  for (int64_t i = 0; i < n; ++i) {
    FeedbackMask& fm = out[i];
    fm.semantics = semantics;
    fm.quality = quality;
    fm.mask.assign(kImgPixels, 0);
    auto square = decoy.decoy_mask(i);
    switch (quality) {
      case FeedbackQuality::correct: {
        if (semantics == FeedbackSemantics::penalty) {
          fm.mask.assign(square.begin(), square.end());
        } else {
          const uint8_t* img = decoy.base.image(i);
          for (int p = 0; p < kImgPixels; ++p) fm.mask[p] = img[p] > 0 ? 1 : 0;
        }
        break;
      }
      case FeedbackQuality::arbitrary: {
        bool top = rng.next_below(2) == 0;
        fill_arbitrary_rect(fm.mask, top);
        if (intersects(fm.mask, square)) {
          std::fill(fm.mask.begin(), fm.mask.end(), 0);
          fill_arbitrary_rect(fm.mask, !top);
          XILTK_CHECK(!intersects(fm.mask, square),
                      "arbitrary feedback: both border rectangles intersect the "
                      "confounder for image " + std::to_string(i));
        }
        break;
      }
      case FeedbackQuality::incomplete: {
        if (semantics == FeedbackSemantics::penalty) {
          // top half of the square: the 2x4 sub-block, 8 pixels
          int r0 = kCornerRow[decoy.corner[i]], c0 = kCornerCol[decoy.corner[i]];
          for (int r = 0; r < kDecoySide / 2; ++r)
            for (int c = 0; c < kDecoySide; ++c) fm.mask[(r0 + r) * kImgW + c0 + c] = 1;
        } else {
          const uint8_t* img = decoy.base.image(i);
          for (int p = 0; p < kImgPixels / 2; ++p) fm.mask[p] = img[p] > 0 ? 1 : 0;
        }
        break;
      }
      case FeedbackQuality::empty:
        break;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------

std::string ce_strategy_name(CeStrategy s) {
  switch (s) {
    case CeStrategy::randomize: return "randomize";
    case CeStrategy::alternative: return "alternative";
    case CeStrategy::substitute: return "substitute";
  }
  return "?";
}

CeStrategy ce_strategy_from_name(const std::string& s) {
  if (s == "randomize") return CeStrategy::randomize;
  if (s == "alternative") return CeStrategy::alternative;
  if (s == "substitute") return CeStrategy::substitute;
  throw TensorError("unknown CE strategy '" + s + "'");
}

std::vector<Counterexample> make_counterexamples(const DecoySet& decoy,
                                                 const std::vector<FeedbackMask>& feedback,
                                                 CeStrategy strategy, int copies,
                                                 uint64_t seed) {
  XILTK_CHECK(copies >= 1, "make_counterexamples: copies must be >= 1");
  XILTK_CHECK(static_cast<int64_t>(feedback.size()) == decoy.size(),
              "make_counterexamples: feedback count mismatch");
  int64_t n = decoy.size();

  // same-class donor pool for the substitute strategy
  std::vector<std::vector<int64_t>> by_class(10);
  for (int64_t i = 0; i < n; ++i) by_class[decoy.base.labels[i]].push_back(i);

  Rng rng(seed);
  std::vector<Counterexample> out;
  out.reserve(size_t(n) * copies);
  bool warned_singleton = false;
  for (int64_t i = 0; i < n; ++i) {
    for (int copy = 0; copy < copies; ++copy) {
      Counterexample ce;
      ce.label = decoy.base.labels[i];
      ce.strategy = strategy;
      ce.source_index = i;
      ce.image = decoy.decoyed_image(i);
      CeStrategy effective = strategy;
      if (strategy == CeStrategy::substitute && by_class[ce.label].size() < 2) {
        if (!warned_singleton) {
          std::cerr << "warning: substitute strategy with singleton class "
                    << int(ce.label) << ", falling back to alternative\n";
          warned_singleton = true;
        }
        effective = CeStrategy::alternative;
      }
      const uint8_t* donor = nullptr;
      if (effective == CeStrategy::substitute) {
        const auto& pool = by_class[ce.label];
        int64_t j = i;
        while (j == i) j = pool[rng.next_below(pool.size())];
        donor = decoy.base.image(j);
      }
      for (int p = 0; p < kImgPixels; ++p) {
        if (!feedback[i].mask[p]) continue;
        switch (effective) {
          case CeStrategy::randomize:
            ce.image[p] = static_cast<uint8_t>(rng.next_below(256));
            break;
          case CeStrategy::alternative:
            ce.image[p] = 0;
            break;
          case CeStrategy::substitute:
            ce.image[p] = donor[p];
            break;
        }
      }
      out.push_back(ce);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------

int64_t FeedbackSet::count_present() const {
  if (present.empty()) return static_cast<int64_t>(masks.size());
  int64_t c = 0;
  for (auto p : present) c += p;
  return c;
}

FeedbackSet sample_feedback_subset(const std::vector<FeedbackMask>& feedback, int64_t k,
                                   uint64_t seed) {
  int64_t n = static_cast<int64_t>(feedback.size());
  XILTK_CHECK(k >= 0 && k <= n,
              "sample_feedback_subset: k=" + std::to_string(k) + " out of range [0," +
                  std::to_string(n) + "]");
  FeedbackSet set;
  set.masks = feedback;
  set.present.assign(n, 0);
  std::vector<int64_t> idx(n);
  for (int64_t i = 0; i < n; ++i) idx[i] = i;
  Rng rng(seed);
  rng.shuffle(idx);
  for (int64_t i = 0; i < k; ++i) set.present[idx[i]] = 1;
  return set;
}

// ---------------------------------------------------------------------------

void save_decoy_cache(const std::string& path, const DecoySet& set,
                      const std::string& base_name) {
  ArrayFile file;
  file.meta["kind"] = "decoy_manifest";
  file.meta["base"] = base_name;
  file.meta["seed"] = set.seed;
  file.meta["shade_rule"] = "train: 255 - 25*label; test: uniform {0,25,...,225}";
  file.meta["corner_stream"] = 1;
  file.meta["split"] = set.base.split == Split::train ? "train" : "test";
  auto to_f64 = [](const std::vector<uint8_t>& v) {
    return std::vector<double>(v.begin(), v.end());
  };
  file.arrays.push_back({"corner", {set.size()}, to_f64(set.corner)});
  file.arrays.push_back({"shade", {set.size()}, to_f64(set.shade)});
  write_array_file(path, file);
}

DecoySet load_decoy_cache(const std::string& path, const ImageSet& base) {
  ArrayFile file = read_array_file(path);
  DecoySet d;
  d.base = base;
  d.seed = file.meta.at("seed").get<uint64_t>();
  auto to_u8 = [](const std::vector<double>& v) {
    std::vector<uint8_t> out(v.size());
    for (size_t i = 0; i < v.size(); ++i) out[i] = static_cast<uint8_t>(v[i]);
    return out;
  };
  d.corner = to_u8(file.at("corner").data);
  d.shade = to_u8(file.at("shade").data);
  XILTK_CHECK(static_cast<int64_t>(d.corner.size()) == base.size(),
              path + ": cache does not match base set size");
  return d;
}

}  // namespace xiltk
