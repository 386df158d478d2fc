#include "boxgen/vocab.hpp"

#include <sstream>
#include <unordered_map>

namespace boxgen::vocab {

const std::vector<std::string>& color_names() {
  static const std::vector<std::string> v{"red", "green", "blue", "yellow", "purple", "orange"};
  return v;
}

const std::vector<std::string>& shape_names() {
  static const std::vector<std::string> v{"circle", "square", "triangle"};
  return v;
}

const std::vector<std::string>& background_names() {
  static const std::vector<std::string> v{"plain", "gradient", "checkerboard"};
  return v;
}

int category_id(int shape_idx, int color_idx) {
  if (shape_idx < 0 || shape_idx >= kNumShapes || color_idx < 0 || color_idx >= kNumColors)
    throw ValidationError("category_id: shape/color index out of range");
  return shape_idx * kNumColors + color_idx;
}

int shape_of(int category_id) {
  if (category_id < 0 || category_id >= kNumCategories)
    throw ValidationError("shape_of: category " + std::to_string(category_id) + " out of range");
  return category_id / kNumColors;
}

int color_of(int category_id) {
  if (category_id < 0 || category_id >= kNumCategories)
    throw ValidationError("color_of: category " + std::to_string(category_id) + " out of range");
  return category_id % kNumColors;
}

std::string category_name(int id) {
  return color_names()[color_of(id)] + " " + shape_names()[shape_of(id)];
}

const std::vector<std::string>& caption_words() {
  static const std::vector<std::string> v = [] {
    std::vector<std::string> w{"<pad>", "a", "on", "of", "left", "right", "above", "below",
                               "background"};
    for (const auto& c : color_names()) w.push_back(c);
    for (const auto& s : shape_names()) w.push_back(s);
    for (const auto& b : background_names()) w.push_back(b);
    return w;
  }();
  return v;
}

int word_id(const std::string& word) {
  static const std::unordered_map<std::string, int> index = [] {
    std::unordered_map<std::string, int> m;
    for (size_t i = 0; i < caption_words().size(); ++i) m[caption_words()[i]] = static_cast<int>(i);
    return m;
  }();
  auto it = index.find(word);
  if (it == index.end()) throw ValidationError("caption word outside vocabulary: " + word);
  return it->second;
}

std::vector<int> tokenize_caption(const std::string& caption, int len) {
  std::vector<int> ids;
  std::istringstream is(caption);
  std::string w;
  while (is >> w && static_cast<int>(ids.size()) < len) ids.push_back(word_id(w));
  ids.resize(len, 0);
  return ids;
}

}  // namespace boxgen::vocab
