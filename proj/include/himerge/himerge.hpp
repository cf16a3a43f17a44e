#pragma once

#include "himerge/checkpoint.hpp"
#include "himerge/config.hpp"
#include "himerge/contribution.hpp"
#include "himerge/delta.hpp"
#include "himerge/dtype.hpp"
#include "himerge/error.hpp"
#include "himerge/evaluation.hpp"
#include "himerge/hash.hpp"
#include "himerge/layers.hpp"
#include "himerge/merge.hpp"
#include "himerge/resolver.hpp"
#include "himerge/subprocess.hpp"
