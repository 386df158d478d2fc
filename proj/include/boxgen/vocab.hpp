#pragma once

#include <string>
#include <vector>

#include "boxgen/core/common.hpp"

namespace boxgen::vocab {

// Closed world: 6 colors x 3 shapes = 18 categories, 3 backgrounds.
// category_id = shape_index * n_colors + color_index.

inline constexpr int kNumColors = 6;
inline constexpr int kNumShapes = 3;
inline constexpr int kNumCategories = kNumColors * kNumShapes;
inline constexpr int kNumBackgrounds = 3;

const std::vector<std::string>& color_names();
const std::vector<std::string>& shape_names();
const std::vector<std::string>& background_names();

int category_id(int shape_idx, int color_idx);
int shape_of(int category_id);
int color_of(int category_id);
std::string category_name(int category_id);  // "<color> <shape>"

// Caption token vocabulary: id 0 is padding, the rest are the closed set of
// words the caption templates can emit.
const std::vector<std::string>& caption_words();
int word_id(const std::string& word);  // throws ValidationError on unknown word

// Lowercase whitespace split, mapped to ids, padded/truncated to len.
std::vector<int> tokenize_caption(const std::string& caption, int len);

}  // namespace boxgen::vocab
