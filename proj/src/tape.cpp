#include "tuned_lens/tape.hpp"

namespace tuned_lens::numerics {

template class GradientTape<float>;
template class GradientTape<double>;

}  // namespace tuned_lens::numerics
