#pragma once

namespace stepnav {

using Node = int;
using Token = int;

} // namespace stepnav
