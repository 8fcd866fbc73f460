#pragma once

namespace bob::token {

// Reserved vocabulary ids. Stable across vocab save/load.
inline constexpr int pad = 0;
inline constexpr int unk = 1;
inline constexpr int sep = 2;  // [s] between persona and query
inline constexpr int bos = 3;
inline constexpr int eos = 4;
inline constexpr int mask = 5;  // masked-LM slot for the encoder-only ablation
inline constexpr int num_reserved = 6;

}  // namespace bob::token
