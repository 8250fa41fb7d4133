"""
### ResNet-18 classifier for glioblastoma histology patches, written on numpy alone.

Classifies H&E patches into six histologic classes (CT, PN, MP, NC, IC, WM), trains with
class-weighted cross-entropy, Adam and early stopping, runs stratified five-fold
cross-validation and averages the fold models' probabilities into an ensemble.

This package contains the following modules: ::
    - `tensor`: convolution, batch norm, ReLU, pooling, linear and softmax with their gradients.
    - `model`: ResNet-18 parameters, forward and backward passes.
    - `data`: manifests, the PPM codec, normalization, stratified splits and folds.
    - `train`: weighted cross-entropy, Adam, early stopping and the `Trainer` class.
    - `evaluation`: confusion matrices, per-class/micro/macro metrics and MCC.
    - `ensemble`: checkpoint files and ensemble prediction.
    - `cli`: the `gbm-patch` command.
    - `Logger` and `FileHandler`: run logs and file reading/writing.

MIT License
------------
Permission is hereby granted, free of charge, to any person obtaining a copy
of this software and associated documentation files (the "Software"), to deal
in the Software without restriction, including without limitation the rights
to use, copy, modify, merge, publish, distribute, sublicense, and/or sell
copies of the Software, and to permit persons to whom the Software is
furnished to do so, subject to the following conditions:

The above copyright notice and this permission notice shall be included in all
copies or substantial portions of the Software.

THE SOFTWARE IS PROVIDED "AS IS", WITHOUT WARRANTY OF ANY KIND, EXPRESS OR
IMPLIED, INCLUDING BUT NOT LIMITED TO THE WARRANTIES OF MERCHANTABILITY,
FITNESS FOR A PARTICULAR PURPOSE AND NONINFRINGEMENT. IN NO EVENT SHALL THE
AUTHORS OR COPYRIGHT HOLDERS BE LIABLE FOR ANY CLAIM, DAMAGES OR OTHER
LIABILITY, WHETHER IN AN ACTION OF CONTRACT, TORT OR OTHERWISE, ARISING FROM,
OUT OF OR IN CONNECTION WITH THE SOFTWARE OR THE USE OR OTHER DEALINGS IN THE
SOFTWARE.
"""

__version__ = '0.1.0'
__date__ = '18-10-2026'
__license__ = 'MIT'
__title__ = 'gbm_patch_classifier'

from .exceptions import *
