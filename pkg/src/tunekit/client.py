"""Client for OpenAI-compatible chat completion endpoints.

Responses can be cached on disk: each request maps to a file named after its
parameters, a cache hit is served without contacting the server. This makes
remote evaluations reproducible and allows running them off-line.
"""

# pylint: disable-msg=too-many-arguments

import json
import os
import shutil

import requests
from loguru import logger as log

from .common import slugify
from .exceptions import UnknownModelError

CHAT_ACTION = "chat_completions"


class ChatClient:

    """Talk to a chat completion endpoint, optionally through an on-disk cache.

    Attributes
    ----------
    url : str
        The base URL of the service, e.g. `http://localhost:8000`.
    model : str
        The model (or adapter) name requests are addressed to.
    timeout : int
        The timeout value used with the `requests.post` calls.
    cache_path : str
        A path to a local directory used for caching responses.
    last_served_from_cache : bool
        Indicates if the last request was served from the cache or on-line.
    """

    def __init__(self, url, model="base", timeout=30, cache=""):
        """Constructor for the client.

        Parameters
        ----------
        url : str
            Base URL of the service (without the `/v1/...` part).
        model : str, optional
            Model name put into every request, by default "base".
        timeout : int, optional
            How many seconds to wait for the server before giving up, by
            default 30.
        cache : str, optional
            Path to a directory used to cache responses, by default "" which
            disables caching.
        """
        self.url = url.rstrip("/")
        self.model = model
        self.timeout = timeout
        self.cache_path = cache
        self.last_served_from_cache = False
        """Indicates if the last request was served from the cache or on-line."""

    def __str__(self):
        return (
            f"ChatClient(url={self.url}, model={self.model}, "
            f"cache='{self.cache_path}')"
        )

    def chat(self, messages, temperature=0.0, max_tokens=64, skip_cache=False):
        """Request a chat completion.

        Parameters
        ----------
        messages : list(dict)
            OpenAI style messages (`role` and `content`).
        temperature : float, optional
        max_tokens : int, optional
        skip_cache : bool, optional
            If set to True the request will NOT be served from the local cache,
            by default False.

        Returns
        -------
        dict
            The decoded response object.

        Raises
        ------
        UnknownModelError
            Raised if the service doesn't know the requested model name.
        requests.exceptions.HTTPError
            Raised for any other non-200 status code.
        """
        payload = {
            "model": self.model,
            "messages": list(messages),
            "temperature": temperature,
            "max_tokens": max_tokens,
        }
        response = self.request(CHAT_ACTION, payload, skip_cache)
        if response.status_code != 200:
            detail = _error_message(response.text)
            msg = f"Chat request failed with status {response.status_code}: {detail}"
            log.error(msg)
            if response.status_code == 404:
                raise UnknownModelError(msg)
            raise requests.exceptions.HTTPError(msg)

        return json.loads(response.text)

    def complete(self, messages, **kwargs):
        """The assistant message text of a chat completion."""
        return self.chat(messages, **kwargs)["choices"][0]["message"]["content"]

    def list_models(self):
        """Names of the models served by the endpoint."""
        response = requests.get(f"{self.url}/v1/models", timeout=self.timeout)
        if response.status_code != 200:  # pragma: no cover
            msg = f"Listing models failed with status {response.status_code}"
            log.error(msg)
            raise requests.exceptions.HTTPError(msg)
        return [entry["id"] for entry in response.json()["data"]]

    def request(self, action, payload, skip_cache=False):
        """Submit a request, serving it from the cache if possible.

        Parameters
        ----------
        action : str
            The endpoint name, also the name of the cache sub-directory.
        payload : dict
            The JSON body of the request.
        skip_cache : bool, optional

        Returns
        -------
        requests.Response or PseudoResponse
            An object having `text` and `status_code` attributes.
        """
        response = None
        try:
            if skip_cache:  # pragma: no cover
                raise LookupError("Skipping the cache has been requested")
            response = self.__intercept_read(payload, action)
            self.last_served_from_cache = True
        except LookupError as err:
            log.trace(f"Doing an on-line request: {err}")
            response = requests.post(
                f"{self.url}/v1/{action.replace('_', '/')}",
                json=payload,
                timeout=self.timeout,
            )
            self.last_served_from_cache = False

        if not self.last_served_from_cache:  # pragma: no cover
            self.__intercept_store(payload, action, response)

        return response

    def interception_path(self, payload, action=CHAT_ACTION, create_dir=False):
        """Derive the path of the cache file for a request.

        The file is named after the sorted request parameters with the
        conversation reduced to a slug of the last user message.

        Parameters
        ----------
        payload : dict
        action : str, optional
        create_dir : bool, optional
            If set to True the cache directory will be created if necessary.

        Returns
        -------
        str or None
        """
        intercept_dir = os.path.join(self.cache_path, action)
        if create_dir and not os.path.exists(intercept_dir):  # pragma: no cover
            try:
                os.makedirs(intercept_dir)
                log.trace(f"Created dir to store response: {intercept_dir}")
            except Exception as err:  # pylint: disable-msg=broad-except
                log.warning(f"Failed creating [{intercept_dir}]: {err}")
                return None

        params = {key: value for key, value in payload.items() if key != "messages"}
        messages = payload.get("messages", [])
        users = [m["content"] for m in messages if m["role"] == "user"]
        if users:
            params["query"] = slugify(users[-1])
        signature = "__".join(f"{key}--{params[key]}" for key in sorted(params))
        if signature == "":
            signature = "response"
        return os.path.join(intercept_dir, signature + ".json")

    def __intercept_read(self, payload, action):
        """Try to read a cached response from a local file.

        Raises
        ------
        LookupError
            Raised in case no cache path has been set or no cache file matching
            the request parameters could be found in the cache.
        """

        # pylint: disable-msg=too-few-public-methods
        class PseudoResponse:
            """Dummy response object with attribs 'text' and 'status_code'."""

            def __init__(self, text, status_code):
                self.text = text
                self.status_code = int(status_code)

        if self.cache_path == "":
            raise LookupError("No cache path configured")

        intercept_file = self.interception_path(payload, action, create_dir=False)
        if not intercept_file or not os.path.exists(intercept_file):
            raise LookupError(f"No cache hit for [{intercept_file}]")

        with open(intercept_file, "r", encoding="utf-8") as infile:
            text = infile.read()
        log.debug(
            "Read intercepted response text from [{}]",
            intercept_file[len(str(self.cache_path)) :],
        )

        status_code = 200
        status_file = os.path.splitext(intercept_file)[0] + "_status-code.txt"
        if os.path.exists(status_file):
            with open(status_file, "r", encoding="utf-8") as infile:
                status_code = infile.read().strip()
            log.debug(f"Read intercepted response status code from [{status_file}]")
        return PseudoResponse(text, status_code)

    def __intercept_store(self, payload, action, response):  # pragma: no cover
        """Store the response in a local cache file named after the request."""
        if self.cache_path == "":
            return

        intercept_file = self.interception_path(payload, action, create_dir=True)
        if not intercept_file:
            log.trace("Not storing intercepted results in cache.")
            return

        try:
            with open(intercept_file, "w", encoding="utf-8") as outfile:
                outfile.write(response.text)
            if response.status_code != 200:
                status_file = os.path.splitext(intercept_file)[0] + "_status-code.txt"
                with open(status_file, "w", encoding="utf-8") as outfile:
                    outfile.write(str(response.status_code))
            log.debug("Wrote response text to [{}]", intercept_file)
        except Exception as err:  # pylint: disable-msg=broad-except
            log.error("Storing response text in [{}] failed: {}", intercept_file, err)

    def flush_cache(self):
        """Remove the on-disk cache of chat completions."""
        if self.cache_path == "":
            log.debug("No cache path configured, not flushing!")
            return

        dir_path = os.path.join(self.cache_path, CHAT_ACTION)
        if not os.path.exists(dir_path):
            return
        log.debug("Flushing the on-disk cache at [{}]...", dir_path)
        try:
            shutil.rmtree(dir_path)
            log.debug("Finished flushing the on-disk cache.")
        except Exception as err:  # pylint: disable-msg=broad-except
            log.error("Removing the cache at [{}] failed: {}", dir_path, err)


def _error_message(text):
    try:
        return json.loads(text)["error"]["message"]
    except (ValueError, KeyError, TypeError):
        return text.strip()


def record_messages(record):
    """OpenAI style messages of a record's prompt (system, history, query)."""
    messages = []
    if record.system is not None:
        messages.append({"role": "system", "content": record.system})
    for query, response in record.history:
        messages.append({"role": "user", "content": query})
        messages.append({"role": "assistant", "content": response})
    messages.append({"role": "user", "content": record.query})
    return messages


def evaluate_remote(client, dataset, max_tokens=64):
    """Exact match of a served model over a dataset, at temperature 0.

    Parameters
    ----------
    client : ChatClient
    dataset : list(StandardRecord)
    max_tokens : int, optional

    Returns
    -------
    dict
        `exact_match` and the number of evaluated records `n`.
    """
    matches = 0
    for record in dataset:
        answer = client.complete(
            record_messages(record), temperature=0.0, max_tokens=max_tokens
        )
        matches += int(answer == record.response)
    score = matches / len(dataset) if dataset else 0.0
    result = {"exact_match": score, "n": len(dataset)}
    log.info("Remote evaluation against [{}]: {}", client.url, result)
    return result
