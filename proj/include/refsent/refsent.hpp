#pragma once

#include "refsent/text.hpp"
#include "refsent/rating.hpp"
#include "refsent/corpus.hpp"
#include "refsent/promptgen.hpp"
#include "refsent/inference.hpp"
#include "refsent/http_backend.hpp"
#include "refsent/metrics.hpp"
#include "refsent/analysis.hpp"
#include "refsent/reference.hpp"
#include "refsent/report.hpp"
#include "refsent/harness.hpp"
